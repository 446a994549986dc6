"""Pretraining: mask schedules, modality sampling, loss assembly, loop.

Each step samples one task (image_mask, text_mask or no_mask), masks
accordingly, and takes a single clipped AdamW step with linear warmup.
Masked losses are computed only at masked positions, gathered before the
head so unmasked targets cannot influence them. All randomness flows from
named sub-streams of the config seed, so ablation toggles leave data order
and initialization untouched.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .scenes import CLS, EOS, PAD
from .optim import AdamW, clip_grad_global_norm, warmup_scale
from .tensor import (
    Tape,
    Tensor,
    backward,
    bce_with_logits,
    cross_entropy_from_logits,
    gather_rows,
    mse,
    reshape,
)
from .vocab import quantize

TASK_KINDS = ("image_mask", "text_mask", "no_mask")


class NumericError(RuntimeError):
    """Raised when training encounters a non-finite loss."""


@dataclass(frozen=True)
class Task:
    kind: str
    replaced: bool = False  # only meaningful for no_mask


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    masking: str = "uniform"  # or "bernoulli"
    bernoulli_p: float = 0.15
    text_mask_p: float = 0.15
    visual_objective: str = "ccc"  # or "mvfr"
    ccc_data_filter: bool = True  # drop question captions from image_mask steps

    def __post_init__(self):
        if self.masking not in ("uniform", "bernoulli"):
            raise ValueError(f"unknown masking {self.masking!r}")
        if self.visual_objective not in ("ccc", "mvfr"):
            raise ValueError(f"unknown objective {self.visual_objective!r}")
        if self.masking == "bernoulli" and not 0.0 < self.bernoulli_p < 1.0:
            raise ValueError("bernoulli p must lie in (0, 1)")


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Named deterministic sub-stream of a global seed."""
    ids = {"data": 0, "init": 1, "mask": 2, "task": 3, "itm": 4,
           "dropout": 5, "sampler": 6, "metrics": 7, "features": 8}
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(ids[name],)))


def sample_mask_bernoulli(length: int, p: float, rng: np.random.Generator,
                          eligible=None) -> np.ndarray:
    """Each eligible position masked independently with probability p."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    mask = rng.random(length) < p
    if eligible is not None:
        mask &= np.asarray(eligible, bool)
    return mask


def sample_mask_uniform(length: int, rng: np.random.Generator) -> np.ndarray:
    """Masking ratio uniform over [0, 1]: the masked count is uniform on
    {0..length} and positions are drawn without replacement."""
    if length < 1:
        raise ValueError("length must be >= 1")
    count = int(rng.integers(0, length + 1))
    mask = np.zeros(length, dtype=bool)
    if count:
        mask[rng.choice(length, size=count, replace=False)] = True
    return mask


def sample_task(rng: np.random.Generator) -> Task:
    """Uniform over the three kinds; replaced flag Bernoulli(0.5)."""
    kind = TASK_KINDS[int(rng.integers(3))]
    replaced = bool(rng.random() < 0.5) if kind == "no_mask" else False
    return Task(kind=kind, replaced=replaced)


@dataclass
class PreparedData:
    """Training arrays for fast batching."""
    captions: np.ndarray      # (n, L) int64, PAD-padded
    kinds: np.ndarray         # (n,) object/str
    cluster_ids: np.ndarray   # (n, T) int64
    features: np.ndarray      # (n, T, dim) float32
    non_question_idx: np.ndarray

    @property
    def size(self):
        return self.captions.shape[0]


def prepare_training_data(records, codebook, max_text_len: int) -> PreparedData:
    n = len(records)
    caps = np.full((n, max_text_len), PAD, dtype=np.int64)
    kinds = np.empty(n, dtype=object)
    grid_n = records[0].scene.grid_n
    t_cells = grid_n * grid_n
    feats = np.empty((n, t_cells, records[0].features.shape[-1]), dtype=np.float32)
    for i, r in enumerate(records):
        caps[i, : len(r.caption)] = r.caption
        kinds[i] = r.kind
        feats[i] = r.features.reshape(t_cells, -1)
    ids = quantize(feats, codebook)
    nq = np.flatnonzero(kinds != "question")
    return PreparedData(captions=caps, kinds=kinds, cluster_ids=ids,
                        features=feats, non_question_idx=nq)


def _grid_masks(batch_n, t_cells, config: TrainConfig, rng) -> np.ndarray:
    rows = []
    for _ in range(batch_n):
        if config.masking == "uniform":
            rows.append(sample_mask_uniform(t_cells, rng))
        else:
            rows.append(sample_mask_bernoulli(t_cells, config.bernoulli_p, rng))
    return np.stack(rows)


def _text_masks(captions, p, rng) -> np.ndarray:
    eligible = ~np.isin(captions, (CLS, EOS, PAD))
    mask = rng.random(captions.shape) < p
    return mask & eligible


def train_step(model, optimizer, data: PreparedData, batch_idx, task: Task,
               config: TrainConfig, rngs: dict, step: int,
               total_steps: int) -> dict:
    """One forward/backward/update; returns the step's loss terms."""
    cfg = model.config
    caps = data.captions[batch_idx]
    losses = {}
    with Tape():
        if task.kind == "image_mask":
            gmask = _grid_masks(len(batch_idx), cfg.grid_cells, config, rngs["mask"])
            if cfg.visual_mode == "discrete":
                grid_in = data.cluster_ids[batch_idx]
            else:
                grid_in = data.features[batch_idx]
            out = model.encode(grid_in, caps, grid_mask=gmask,
                               training=True, rng=rngs["dropout"])
            flat_idx = np.flatnonzero(gmask.reshape(-1))
            if flat_idx.size == 0:
                return {}
            h = gather_rows(reshape(out.h_grid, (-1, cfg.d_model)), flat_idx)
            if config.visual_objective == "ccc":
                targets = data.cluster_ids[batch_idx].reshape(-1)[flat_idx]
                loss = cross_entropy_from_logits(model.ccc_logits(h), targets)
                losses["ccc"] = loss
            else:
                targets = data.features[batch_idx].reshape(-1, cfg.feature_dim)[flat_idx]
                loss = mse(model.mvfr_regress(h), targets)
                losses["mvfr"] = loss
        elif task.kind == "text_mask":
            tmask = _text_masks(caps, config.text_mask_p, rngs["mask"])
            if not tmask.any():
                return {}
            grid_in = (data.cluster_ids[batch_idx] if cfg.visual_mode == "discrete"
                       else data.features[batch_idx])
            out = model.encode(grid_in, caps, text_mask=tmask,
                               training=True, rng=rngs["dropout"])
            b_pos, t_pos = np.nonzero(tmask)
            flat_idx = b_pos * (caps.shape[1] - 1) + (t_pos - 1)
            h = gather_rows(reshape(out.h_text, (-1, cfg.d_model)), flat_idx)
            targets = caps[b_pos, t_pos]
            loss = cross_entropy_from_logits(model.mlm_logits(h), targets)
            losses["mlm"] = loss
        else:  # no_mask: image-text matching
            if task.replaced:
                donors = rngs["itm"].integers(0, data.size - 1, size=len(batch_idx))
                donors = donors + (donors >= batch_idx)  # never the same record
                caps = data.captions[donors]
                labels = np.zeros(len(batch_idx), dtype=np.float32)
            else:
                labels = np.ones(len(batch_idx), dtype=np.float32)
            grid_in = (data.cluster_ids[batch_idx] if cfg.visual_mode == "discrete"
                       else data.features[batch_idx])
            out = model.encode(grid_in, caps, training=True, rng=rngs["dropout"])
            logit = reshape(model.itm_logit(out.h_cls), (len(batch_idx),))
            loss = bce_with_logits(logit, labels)
            losses["itm"] = loss

        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}: {losses}")
        optimizer.zero_grad()
        backward(loss)
    clip_grad_global_norm(model.parameters(), config.grad_clip)
    optimizer.step(lr_scale=warmup_scale(step + 1,
                                         max(1, round(config.warmup_frac * total_steps))))
    return {k: float(v.data) for k, v in losses.items()}


def pretrain_loop(config: TrainConfig, data: PreparedData, model,
                  log_path=None, checkpoint_fn=None,
                  checkpoint_every: int = 0) -> list:
    """Run epochs x steps of task-sampled training; returns the loss log."""
    rngs = {name: stream_rng(config.seed, name)
            for name in ("data", "mask", "task", "itm", "dropout")}
    optimizer = AdamW(model.parameters(), lr=config.lr,
                      weight_decay=config.weight_decay)
    steps_per_epoch = max(1, int(np.ceil(data.size / config.batch_size)))
    total_steps = config.epochs * steps_per_epoch
    log = []
    t0 = time.perf_counter()
    for step in range(total_steps):
        task = sample_task(rngs["task"])
        if task.kind == "image_mask" and config.ccc_data_filter:
            pool = data.non_question_idx
        else:
            pool = np.arange(data.size)
        batch = rngs["data"].choice(pool, size=min(config.batch_size, pool.size),
                                    replace=False)
        losses = train_step(model, optimizer, data, batch, task, config, rngs,
                            step, total_steps)
        row = {"step": step, "task": task.kind,
               "lr": config.lr * warmup_scale(step + 1,
                                              max(1, round(config.warmup_frac * total_steps))),
               "wall_clock": time.perf_counter() - t0}
        row.update(losses)
        log.append(row)
        if checkpoint_fn is not None and checkpoint_every and \
                (step + 1) % checkpoint_every == 0:
            checkpoint_fn(step + 1, model)
    if checkpoint_fn is not None:
        checkpoint_fn(total_steps, model)
    if log_path is not None:
        write_training_log(log_path, log)
    return log


def write_training_log(path, log):
    cols = ["step", "task", "ccc", "mvfr", "mlm", "itm", "lr", "wall_clock"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for row in log:
            f.write(",".join("" if row.get(c) is None else str(row.get(c, ""))
                             for c in cols) + "\n")
