"""Synthetic decodable scenes: grids of colored glyphs, captions, features.

Scenes place 1-3 colored shapes on an N x N grid. Each cell maps to one of
17 content classes (4 shapes x 4 colors + background) whose prototype
embeddings are a fixed seeded random projection rescaled so the minimum
pairwise distance is exactly 1.0; with the default noise level the margin is
two orders of magnitude above sigma, so every noisy feature decodes back to
its class. Captions come from a closed grammar and are checked exactly by
`oracle_check`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SHAPES = ("circle", "square", "triangle", "diamond")
COLORS = ("red", "green", "blue", "yellow")
N_CLASSES = 17  # 16 shape-color combinations + background
BACKGROUND_CLASS = 16

CLS, EOS, MASK, PAD = 0, 1, 2, 3
_WORDS = (
    "a", "red", "green", "blue", "yellow",
    "circle", "square", "triangle", "diamond",
    "in", "the", "top", "bottom", "left", "right",
    "above", "below", "of",
    "one", "two", "three", "objects",
    "what", "color", "is",
)
WORD_TO_ID = {w: i + 4 for i, w in enumerate(_WORDS)}
ID_TO_WORD = {i + 4: w for i, w in enumerate(_WORDS)}
TEXT_VOCAB_SIZE = 4 + len(_WORDS)

NUMBER_WORDS = ("one", "two", "three")
CAPTION_KINDS = ("descriptive", "relational", "counting", "question")

DEFAULT_GRID_N = 4
DEFAULT_FEATURE_DIM = 16
DEFAULT_NOISE_STD = 0.005
DEFAULT_MAX_TEXT_LEN = 16

_PROTOTYPE_SEED = 424242


class GrammarError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    row: int
    col: int
    shape: int  # index into SHAPES
    color: int  # index into COLORS


@dataclass(frozen=True)
class Scene:
    grid_n: int
    objects: tuple

    def __post_init__(self):
        cells = [(o.row, o.col) for o in self.objects]
        if not 1 <= len(cells) <= 3:
            raise ValueError("scene must contain 1 to 3 objects")
        if len(set(cells)) != len(cells):
            raise ValueError("objects must occupy distinct cells")
        for r, c in cells:
            if not (0 <= r < self.grid_n and 0 <= c < self.grid_n):
                raise ValueError("object cell out of range")


@dataclass
class FeatureGrid:
    grid_n: int
    dim: int
    features: np.ndarray  # (N, N, dim) float32


def content_class(shape: int, color: int) -> int:
    return shape * len(COLORS) + color


def class_shape_color(cls_id: int):
    """Inverse of content_class; None for background."""
    if cls_id == BACKGROUND_CLASS:
        return None
    return divmod(cls_id, len(COLORS))


_prototype_cache = {}


def prototype_matrix(dim: int = DEFAULT_FEATURE_DIM) -> np.ndarray:
    """(17, dim) prototype embeddings with min pairwise distance 1.0.

    One-hot(shape) + one-hot(color) + background flag, pushed through a fixed
    seeded Gaussian projection, then rescaled so the smallest pairwise
    distance is exactly 1.
    """
    if dim in _prototype_cache:
        return _prototype_cache[dim]
    enc = np.zeros((N_CLASSES, 9), dtype=np.float64)
    for s in range(len(SHAPES)):
        for c in range(len(COLORS)):
            k = content_class(s, c)
            enc[k, s] = 1.0
            enc[k, 4 + c] = 1.0
    enc[BACKGROUND_CLASS, 8] = 1.0
    rng = np.random.default_rng(_PROTOTYPE_SEED)
    proj = rng.standard_normal((9, dim))
    proto = enc @ proj
    diff = proto[:, None, :] - proto[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    np.fill_diagonal(dist, np.inf)
    proto /= dist.min()
    out = proto.astype(np.float32)
    _prototype_cache[dim] = out
    return out


def scene_cell_classes(scene: Scene) -> np.ndarray:
    grid = np.full((scene.grid_n, scene.grid_n), BACKGROUND_CLASS, dtype=np.int64)
    for o in scene.objects:
        grid[o.row, o.col] = content_class(o.shape, o.color)
    return grid


def generate_scene(rng: np.random.Generator, grid_n: int = DEFAULT_GRID_N) -> Scene:
    """Uniform object count in 1..3, distinct uniform cells, uniform looks."""
    if grid_n < 2:
        raise ValueError("grid_n must be at least 2")
    count = int(rng.integers(1, 4))
    cells = rng.choice(grid_n * grid_n, size=count, replace=False)
    objs = tuple(
        SceneObject(int(c) // grid_n, int(c) % grid_n,
                    int(rng.integers(len(SHAPES))), int(rng.integers(len(COLORS))))
        for c in cells
    )
    return Scene(grid_n=grid_n, objects=objs)


def scene_features(scene: Scene, sigma: float = DEFAULT_NOISE_STD,
                   rng: np.random.Generator | None = None,
                   dim: int = DEFAULT_FEATURE_DIM) -> FeatureGrid:
    """Prototype embedding per cell plus N(0, sigma^2) noise."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    proto = prototype_matrix(dim)
    classes = scene_cell_classes(scene)
    feats = proto[classes].astype(np.float32)
    if sigma > 0:
        if rng is None:
            raise ValueError("rng required when sigma > 0")
        feats = feats + rng.normal(0.0, sigma, feats.shape).astype(np.float32)
    return FeatureGrid(grid_n=scene.grid_n, dim=dim, features=feats)


def classify_features(feats: np.ndarray, dim: int = DEFAULT_FEATURE_DIM) -> np.ndarray:
    """Nearest-prototype class id for each feature vector (last axis = dim)."""
    proto = prototype_matrix(dim)
    flat = feats.reshape(-1, dim)
    d2 = ((flat[:, None, :] - proto[None, :, :]) ** 2).sum(-1)
    return d2.argmin(axis=1).reshape(feats.shape[:-1])


def decode_feature_grid(grid: FeatureGrid) -> Scene | None:
    """Nearest-prototype decoding back to a Scene; None when it has no
    objects or more than 3 (outside the Scene invariant)."""
    classes = classify_features(grid.features, grid.dim)
    objs = []
    for r in range(grid.grid_n):
        for c in range(grid.grid_n):
            sc = class_shape_color(int(classes[r, c]))
            if sc is not None:
                objs.append(SceneObject(r, c, sc[0], sc[1]))
    if not 1 <= len(objs) <= 3:
        return None
    return Scene(grid_n=grid.grid_n, objects=tuple(objs))


# ---------------------------------------------------------------------------
# caption grammar


def _quadrant(obj: SceneObject, grid_n: int):
    v = "top" if obj.row < grid_n // 2 else "bottom"
    h = "left" if obj.col < grid_n // 2 else "right"
    return v, h


def _phrase(obj: SceneObject, grid_n: int):
    v, h = _quadrant(obj, grid_n)
    return ["a", COLORS[obj.color], SHAPES[obj.shape], "in", "the", v, h]


def caption_for(scene: Scene, kind: str, rng: np.random.Generator,
                max_text_len: int = DEFAULT_MAX_TEXT_LEN) -> list:
    """Token-id caption of the given kind, true of the scene (except for the
    deliberately ambiguous question kind)."""
    if kind not in CAPTION_KINDS:
        raise ValueError(f"unknown caption kind {kind!r}")
    if kind == "relational" and len(scene.objects) < 2:
        kind = "descriptive"

    if kind == "descriptive":
        n_desc = min(len(scene.objects), 2)
        picks = rng.choice(len(scene.objects), size=n_desc, replace=False)
        words = []
        for i in picks:
            words.extend(_phrase(scene.objects[int(i)], scene.grid_n))
    elif kind == "relational":
        i, j = rng.choice(len(scene.objects), size=2, replace=False)
        o1, o2 = scene.objects[int(i)], scene.objects[int(j)]
        rels = []
        if o1.row < o2.row:
            rels.append(["above"])
        if o1.row > o2.row:
            rels.append(["below"])
        if o1.col < o2.col:
            rels.append(["left", "of"])
        if o1.col > o2.col:
            rels.append(["right", "of"])
        rel = rels[int(rng.integers(len(rels)))]
        words = (["a", COLORS[o1.color], SHAPES[o1.shape]] + rel
                 + ["a", COLORS[o2.color], SHAPES[o2.shape]])
    elif kind == "counting":
        if rng.random() < 0.5:
            color = scene.objects[int(rng.integers(len(scene.objects)))].color
            n = sum(1 for o in scene.objects if o.color == color)
            attr = COLORS[color]
        else:
            shape = scene.objects[int(rng.integers(len(scene.objects)))].shape
            n = sum(1 for o in scene.objects if o.shape == shape)
            attr = SHAPES[shape]
        words = [NUMBER_WORDS[n - 1], attr, "objects"]
    else:  # question: names a shape present but pins nothing else
        shape = scene.objects[int(rng.integers(len(scene.objects)))].shape
        words = ["what", "color", "is", "the", SHAPES[shape]]

    ids = [CLS] + [WORD_TO_ID[w] for w in words] + [EOS]
    if len(ids) > max_text_len:
        raise ValueError("caption exceeds max text length")
    return ids


def caption_words(tokens) -> list:
    """Strip specials and map ids back to words."""
    return [ID_TO_WORD[t] for t in tokens if t not in (CLS, EOS, MASK, PAD)]


# constraint forms: ("exists", color|None, shape|None, region|None)
#                   ("relation", spec1, rel, spec2)
#                   ("count", "color"|"shape", value_index, n)


def parse_caption(tokens) -> list:
    """Parse a caption into checkable constraints; GrammarError if invalid."""
    words = caption_words(tokens)
    if not words:
        raise GrammarError("empty caption")

    def parse_phrase(pos):
        if pos >= len(words) or words[pos] != "a":
            raise GrammarError(f"expected 'a' at {pos}")
        pos += 1
        if pos >= len(words) or words[pos] not in COLORS:
            raise GrammarError(f"expected color at {pos}")
        color = COLORS.index(words[pos])
        pos += 1
        if pos >= len(words) or words[pos] not in SHAPES:
            raise GrammarError(f"expected shape at {pos}")
        shape = SHAPES.index(words[pos])
        pos += 1
        region = None
        if words[pos : pos + 2] == ["in", "the"]:
            if pos + 4 > len(words):
                raise GrammarError("truncated region")
            v, h = words[pos + 2], words[pos + 3]
            if v not in ("top", "bottom") or h not in ("right", "left"):
                raise GrammarError("bad region words")
            region = (v, h)
            pos += 4
        return (color, shape, region), pos

    if words[0] == "what":
        if len(words) != 5 or words[:4] != ["what", "color", "is", "the"] \
                or words[4] not in SHAPES:
            raise GrammarError("bad question caption")
        return [("exists", None, SHAPES.index(words[4]), None)]

    if words[0] in NUMBER_WORDS:
        if len(words) != 3 or words[2] != "objects":
            raise GrammarError("bad counting caption")
        n = NUMBER_WORDS.index(words[0]) + 1
        if words[1] in COLORS:
            return [("count", "color", COLORS.index(words[1]), n)]
        if words[1] in SHAPES:
            return [("count", "shape", SHAPES.index(words[1]), n)]
        raise GrammarError("bad counting attribute")

    (c1, s1, r1), pos = parse_phrase(0)
    if pos < len(words) and words[pos] in ("above", "below", "left", "right"):
        if words[pos] in ("left", "right"):
            if pos + 1 >= len(words) or words[pos + 1] != "of":
                raise GrammarError("bad relation")
            rel = words[pos] + "_of"
            pos += 2
        else:
            rel = words[pos]
            pos += 1
        (c2, s2, r2), pos = parse_phrase(pos)
        if pos != len(words) or r1 is not None or r2 is not None:
            raise GrammarError("bad relational caption")
        return [("exists", c1, s1, None), ("exists", c2, s2, None),
                ("relation", (c1, s1), rel, (c2, s2))]

    constraints = []
    def emit(c, s, r):
        constraints.append(("exists", c, s, None))
        if r is not None:
            constraints.append(("exists", c, s, r))
    emit(c1, s1, r1)
    while pos < len(words):
        (c, s, r), pos = parse_phrase(pos)
        emit(c, s, r)
    return constraints


def _matches(obj: SceneObject, color, shape, region, grid_n):
    if color is not None and obj.color != color:
        return False
    if shape is not None and obj.shape != shape:
        return False
    if region is not None and _quadrant(obj, grid_n) != region:
        return False
    return True


def _relation_holds(o1: SceneObject, rel: str, o2: SceneObject) -> bool:
    if rel == "above":
        return o1.row < o2.row
    if rel == "below":
        return o1.row > o2.row
    if rel == "left_of":
        return o1.col < o2.col
    if rel == "right_of":
        return o1.col > o2.col
    raise GrammarError(f"unknown relation {rel}")


def oracle_check(scene_or_grid, caption) -> float:
    """Fraction of the caption's constraints satisfied, in [0, 1].

    Feature grids are first decoded to scenes by nearest prototype; a grid
    that decodes to no valid scene satisfies nothing.
    """
    constraints = parse_caption(caption)
    if isinstance(scene_or_grid, FeatureGrid):
        scene = decode_feature_grid(scene_or_grid)
    else:
        scene = scene_or_grid
    if scene is None:
        return 0.0
    objs = scene.objects
    ok = 0
    for con in constraints:
        if con[0] == "exists":
            _, color, shape, region = con
            if any(_matches(o, color, shape, region, scene.grid_n) for o in objs):
                ok += 1
        elif con[0] == "count":
            _, attr, value, n = con
            if attr == "color":
                cnt = sum(1 for o in objs if o.color == value)
            else:
                cnt = sum(1 for o in objs if o.shape == value)
            if cnt == n:
                ok += 1
        else:
            _, (c1, s1), rel, (c2, s2) = con
            hit = False
            for o1 in objs:
                for o2 in objs:
                    if o1 is o2:
                        continue
                    if (_matches(o1, c1, s1, None, scene.grid_n)
                            and _matches(o2, c2, s2, None, scene.grid_n)
                            and _relation_holds(o1, rel, o2)):
                        hit = True
            if hit:
                ok += 1
    return ok / len(constraints)
