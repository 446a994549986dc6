"""Dataset generation and on-disk format.

Records are line-delimited JSON (id, caption token ids, kind, scene) with the
feature grids in a binary sidecar: magic "GPFEAT1", u32 count / grid_n / dim,
then record-major little-endian f32 payloads. A manifest JSON documents the
grammar and pins the generating config hash.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .scenes import (
    CAPTION_KINDS,
    COLORS,
    DEFAULT_FEATURE_DIM,
    DEFAULT_GRID_N,
    DEFAULT_MAX_TEXT_LEN,
    DEFAULT_NOISE_STD,
    SHAPES,
    Scene,
    SceneObject,
    _WORDS,
    caption_for,
    generate_scene,
    scene_features,
)

FEAT_MAGIC = b"GPFEAT1"


@dataclass
class DataConfig:
    train_records: int = 8000
    eval_records: int = 1000
    grid_n: int = DEFAULT_GRID_N
    feature_dim: int = DEFAULT_FEATURE_DIM
    noise_std: float = DEFAULT_NOISE_STD
    max_text_len: int = DEFAULT_MAX_TEXT_LEN
    # weights over (descriptive, relational, counting, question)
    kind_weights: tuple = (0.4, 0.2, 0.15, 0.25)


@dataclass
class DatasetRecord:
    record_id: int
    caption: list
    kind: str
    scene: Scene
    features: np.ndarray  # (N, N, dim) float32


def build_records(config: DataConfig, rng: np.random.Generator, count: int,
                  id_offset: int = 0) -> list:
    weights = np.asarray(config.kind_weights, dtype=np.float64)
    weights = weights / weights.sum()
    records = []
    for i in range(count):
        scene = generate_scene(rng, config.grid_n)
        kind = CAPTION_KINDS[int(rng.choice(len(CAPTION_KINDS), p=weights))]
        if kind == "relational" and len(scene.objects) < 2:
            kind = "descriptive"
        caption = caption_for(scene, kind, rng, config.max_text_len)
        feats = scene_features(scene, config.noise_std, rng, config.feature_dim)
        records.append(DatasetRecord(id_offset + i, caption, kind, scene,
                                     feats.features))
    return records


def _scene_to_json(scene: Scene):
    return {
        "grid_n": scene.grid_n,
        "objects": [[o.row, o.col, SHAPES[o.shape], COLORS[o.color]]
                    for o in scene.objects],
    }


def _scene_from_json(d) -> Scene:
    objs = tuple(SceneObject(r, c, SHAPES.index(s), COLORS.index(col))
                 for r, c, s, col in d["objects"])
    return Scene(grid_n=d["grid_n"], objects=objs)


def save_records(path_prefix, records, grid_n: int, dim: int):
    """Write <prefix>.jsonl and the <prefix>.feat sidecar."""
    with open(f"{path_prefix}.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps({
                "id": r.record_id,
                "caption": r.caption,
                "kind": r.kind,
                "scene": _scene_to_json(r.scene),
            }, sort_keys=True) + "\n")
    with open(f"{path_prefix}.feat", "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<III", len(records), grid_n, dim))
        for r in records:
            f.write(np.ascontiguousarray(r.features, dtype="<f4").tobytes())


def load_records(path_prefix) -> list:
    with open(f"{path_prefix}.feat", "rb") as f:
        blob = f.read()
    if blob[: len(FEAT_MAGIC)] != FEAT_MAGIC:
        raise ValueError(f"{path_prefix}.feat: bad sidecar magic")
    count, grid_n, dim = struct.unpack_from("<III", blob, len(FEAT_MAGIC))
    off = len(FEAT_MAGIC) + 12
    per = grid_n * grid_n * dim
    feats = np.frombuffer(blob, dtype="<f4", count=count * per, offset=off)
    feats = feats.reshape(count, grid_n, grid_n, dim)
    records = []
    with open(f"{path_prefix}.jsonl") as f:
        for i, line in enumerate(f):
            d = json.loads(line)
            records.append(DatasetRecord(
                d["id"], list(d["caption"]), d["kind"],
                _scene_from_json(d["scene"]), feats[i].copy()))
    if len(records) != count:
        raise ValueError("jsonl / sidecar record counts disagree")
    return records


def write_manifest(path, config: DataConfig, config_hash: str, counts: dict):
    manifest = {
        "config_hash": config_hash,
        "record_counts": counts,
        "grammar": {
            "words": list(_WORDS),
            "specials": {"CLS": 0, "EOS": 1, "MASK": 2, "PAD": 3},
            "kinds": list(CAPTION_KINDS),
            "regions": "quadrants: top = row < N/2, left = col < N/2",
        },
        "noise_std": config.noise_std,
        "grid_n": config.grid_n,
        "feature_dim": config.feature_dim,
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
