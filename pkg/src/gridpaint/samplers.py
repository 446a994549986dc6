"""Grid generation from a trained model plus prefix-conditioned text Gibbs.

Four grid strategies: top-left-to-bottom-right, random order (a permutation
for the first T steps, then uniform revisits), easy-first, and mask-predict-K
with linearly decaying update counts and lowest-confidence re-masking.
Confidence is the model probability of the chosen id at the iteration that
produced it. With temperature 0 no randomness is consumed except the cell
order of the random strategy.

In continuous (regression) mode the written-back value is the raw regressed
feature vector and confidence falls back to 1 / (1 + distance to the nearest
codebook centroid).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenes import PAD
from .vocab import Codebook

STRATEGIES = ("tlbr", "random", "easy_first", "mask_predict")


@dataclass
class SamplerSchedule:
    strategy: str = "mask_predict"
    k_iters: int = 4          # mask_predict iterations
    steps: int | None = None  # random-strategy update count (default T)
    temperature: float = 1.0  # 0 = argmax wherever a choice is sampled
    anneal: bool = True       # mask_predict: argmax after the first iteration
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.k_iters < 1:
            raise ValueError("k_iters must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def mask_predict_schedule(t_cells: int, k: int) -> list:
    """Update counts decaying linearly from T to 1 over k iterations."""
    if t_cells < 1 or k < 1:
        raise ValueError("t_cells and k must be >= 1")
    if k == 1:
        return [t_cells]
    counts = [_round_half_up(t_cells + (1 - t_cells) * i / (k - 1))
              for i in range(k)]
    counts[0] = t_cells
    counts[-1] = 1
    return counts


class _GridPredictor:
    """One forward pass -> (choice, confidence) for masked cells."""

    def __init__(self, model, captions, codebook: Codebook | None = None):
        self.model = model
        self.captions = np.asarray(captions, dtype=np.int64)
        self.discrete = model.config.visual_mode == "discrete"
        self.codebook = codebook
        if not self.discrete and codebook is None:
            raise ValueError("continuous-mode sampling needs a codebook for "
                             "confidence scores")
        self.t_cells = model.config.grid_cells

    def initial_state(self):
        b = self.captions.shape[0]
        if self.discrete:
            return np.zeros((b, self.t_cells), dtype=np.int64)
        return np.zeros((b, self.t_cells, self.model.config.feature_dim),
                        dtype=np.float32)

    def predict(self, held, mask, tau, rng):
        """Returns (choice, confidence) arrays of shape (B, T[, dim])."""
        out = self.model.encode(held, self.captions, grid_mask=mask,
                                training=False)
        if self.discrete:
            logits = self.model.ccc_logits(out.h_grid).data.astype(np.float64)
            z = logits - logits.max(axis=-1, keepdims=True)
            probs = np.exp(z)
            probs /= probs.sum(axis=-1, keepdims=True)
            if tau == 0:
                choice = probs.argmax(axis=-1)
            else:
                zt = logits / tau
                zt -= zt.max(axis=-1, keepdims=True)
                pt = np.exp(zt)
                pt /= pt.sum(axis=-1, keepdims=True)
                u = rng.random(pt.shape[:-1] + (1,))
                choice = (pt.cumsum(axis=-1) < u).sum(axis=-1)
                choice = np.minimum(choice, pt.shape[-1] - 1)
            conf = np.take_along_axis(probs, choice[..., None], -1)[..., 0]
            return choice, conf
        feats = self.model.mvfr_regress(out.h_grid).data
        flat = feats.reshape(-1, self.codebook.dim).astype(np.float64)
        c = self.codebook.centroids.astype(np.float64)
        d2 = ((flat[:, None, :] - c[None, :, :]) ** 2).sum(-1).min(axis=1)
        conf = (1.0 / (1.0 + np.sqrt(d2))).reshape(feats.shape[:2])
        return feats, conf

    def write(self, held, mask, choice):
        if self.discrete:
            return np.where(mask, choice, held)
        return np.where(mask[..., None], choice, held)


def sample_grids_mask_predict(model, captions, k_iters=4, temperature=1.0,
                              rng=None, codebook=None, anneal=True,
                              trace=None):
    """Mask-Predict-K over a caption batch; k_iters forward passes."""
    pred = _GridPredictor(model, captions, codebook)
    t_cells = pred.t_cells
    counts = mask_predict_schedule(t_cells, k_iters)
    held = pred.initial_state()
    conf = np.zeros((pred.captions.shape[0], t_cells))
    mask = np.ones((pred.captions.shape[0], t_cells), dtype=bool)
    for i, n_i in enumerate(counts):
        if i > 0:
            # stable argsort: ties resolved in row-major cell order
            order = np.argsort(conf, axis=1, kind="stable")[:, :n_i]
            mask = np.zeros_like(mask)
            np.put_along_axis(mask, order, True, axis=1)
        tau_i = temperature if (i == 0 or not anneal) else 0.0
        choice, newconf = pred.predict(held, mask, tau_i, rng)
        held = pred.write(held, mask, choice)
        conf = np.where(mask, newconf, conf)
        if trace is not None:
            trace.append({"iteration": i, "updated": mask.copy(),
                          "grid": held.copy(), "confidence": conf.copy()})
    return held


def sample_grids_tlbr(model, captions, temperature=1.0, rng=None,
                      codebook=None):
    """Row-major autoregressive sampling; exactly T forward passes."""
    pred = _GridPredictor(model, captions, codebook)
    b = pred.captions.shape[0]
    held = pred.initial_state()
    unfilled = np.ones((b, pred.t_cells), dtype=bool)
    for cell in range(pred.t_cells):
        choice, _ = pred.predict(held, unfilled, temperature, rng)
        write_mask = np.zeros_like(unfilled)
        write_mask[:, cell] = True
        held = pred.write(held, write_mask, choice)
        unfilled[:, cell] = False
    return held


def sample_grids_random(model, captions, steps=None, temperature=1.0,
                        rng=None, codebook=None):
    """Random-order updates: a random permutation covers every cell once,
    then further steps revisit uniformly at random."""
    pred = _GridPredictor(model, captions, codebook)
    b = pred.captions.shape[0]
    t_cells = pred.t_cells
    if steps is None:
        steps = t_cells
    if steps < t_cells:
        raise ValueError("steps must cover the grid at least once")
    held = pred.initial_state()
    unfilled = np.ones((b, t_cells), dtype=bool)
    perm = np.argsort(rng.random((b, t_cells)), axis=1)
    for step in range(steps):
        if step < t_cells:
            cell = perm[:, step]
        else:
            cell = rng.integers(0, t_cells, size=b)
        onehot = np.zeros((b, t_cells), dtype=bool)
        onehot[np.arange(b), cell] = True
        mask = unfilled | onehot
        choice, _ = pred.predict(held, mask, temperature, rng)
        held = pred.write(held, onehot, choice)
        unfilled &= ~onehot
    return held


def sample_grids_easy_first(model, captions, temperature=1.0, rng=None,
                            codebook=None):
    """Commit the highest-confidence unfilled cell each step; T passes."""
    pred = _GridPredictor(model, captions, codebook)
    b = pred.captions.shape[0]
    held = pred.initial_state()
    unfilled = np.ones((b, pred.t_cells), dtype=bool)
    for _ in range(pred.t_cells):
        choice, conf = pred.predict(held, unfilled, temperature, rng)
        best = np.where(unfilled, conf, -np.inf).argmax(axis=1)
        onehot = np.zeros_like(unfilled)
        onehot[np.arange(b), best] = True
        held = pred.write(held, onehot, choice)
        unfilled &= ~onehot
    return held


def sample_grids(model, captions, schedule: SamplerSchedule, codebook=None,
                 rng=None):
    """Dispatch on SamplerSchedule; returns (B, T) ids or (B, T, dim)."""
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(schedule.seed))
    if schedule.strategy == "mask_predict":
        return sample_grids_mask_predict(
            model, captions, schedule.k_iters, schedule.temperature, rng,
            codebook, schedule.anneal)
    if schedule.strategy == "tlbr":
        return sample_grids_tlbr(model, captions, schedule.temperature, rng,
                                 codebook)
    if schedule.strategy == "random":
        return sample_grids_random(model, captions, schedule.steps,
                                   schedule.temperature, rng, codebook)
    return sample_grids_easy_first(model, captions, schedule.temperature,
                                   rng, codebook)


def _pad_caption(caption, max_text_len):
    padded = np.full(max_text_len, PAD, dtype=np.int64)
    padded[: len(caption)] = caption
    return padded[None, :]


def _single(fn, model, caption, **kw):
    caps = _pad_caption(caption, model.config.max_text_len)
    out = fn(model, caps, **kw)
    n = model.config.grid_n
    if out.ndim == 2:
        return out[0].reshape(n, n)
    return out[0].reshape(n, n, -1)


def sample_grid_tlbr(model, caption, temperature=1.0, seed=0, codebook=None):
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return _single(sample_grids_tlbr, model, caption, temperature=temperature,
                   rng=rng, codebook=codebook)


def sample_grid_random(model, caption, steps=None, temperature=1.0, seed=0,
                       codebook=None):
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return _single(sample_grids_random, model, caption, steps=steps,
                   temperature=temperature, rng=rng, codebook=codebook)


def sample_grid_easy_first(model, caption, temperature=1.0, seed=0,
                           codebook=None):
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return _single(sample_grids_easy_first, model, caption,
                   temperature=temperature, rng=rng, codebook=codebook)


def sample_grid_mask_predict(model, caption, k_iters=4, temperature=1.0,
                             seed=0, codebook=None, anneal=True, trace=None):
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    caps = _pad_caption(caption, model.config.max_text_len)
    out = sample_grids_mask_predict(model, caps, k_iters, temperature, rng,
                                    codebook, anneal, trace)
    n = model.config.grid_n
    if out.ndim == 2:
        return out[0].reshape(n, n)
    return out[0].reshape(n, n, -1)


def sample_text_gibbs(model, grid, prefix_tokens, steps=None, temperature=1.0,
                      seed=0):
    """Gibbs text sampling around an immutable CLS + prefix; EOS fixed."""
    from .scenes import CLS, EOS, MASK
    cfg = model.config
    max_len = cfg.max_text_len
    prefix_tokens = list(prefix_tokens)
    if 2 + len(prefix_tokens) >= max_len:
        raise ValueError("prefix leaves no room to sample")
    tokens = np.full(max_len, MASK, dtype=np.int64)
    tokens[0] = CLS
    tokens[1 : 1 + len(prefix_tokens)] = prefix_tokens
    tokens[max_len - 1] = EOS
    mutable = np.arange(1 + len(prefix_tokens), max_len - 1)
    if steps is None:
        steps = 2 * mutable.size
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    grid_in = np.asarray(grid).reshape(1, cfg.grid_cells, -1)
    if cfg.visual_mode == "discrete":
        grid_in = np.asarray(grid).reshape(1, cfg.grid_cells)
    for _ in range(steps):
        pos = int(rng.choice(mutable))
        tmask = np.zeros((1, max_len), dtype=bool)
        tmask[0, pos] = True
        out = model.encode(grid_in, tokens[None, :], text_mask=tmask,
                           training=False)
        logits = model.mlm_logits(out.h_text).data[0, pos - 1].astype(np.float64)
        if temperature == 0:
            tokens[pos] = int(logits.argmax())
        else:
            z = logits / temperature
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            tokens[pos] = int(rng.choice(p.size, p=p))
    return tokens.tolist()
