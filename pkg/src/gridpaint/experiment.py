"""Experiment configuration, artifact hashing, and pipeline build steps.

One global seed drives named sub-streams (data / init / mask / task /
sampler / metrics), so two runs with the same config + seed produce
hash-identical artifacts, and ablation variants share data order and model
initialization. Every artifact records the core config hash (data + vocab +
model + train + seed); evaluation refuses mismatched chains.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .dataset import DataConfig, build_records, load_records, save_records, write_manifest
from .model import CrossModalModel, ModelConfig
from .pretrain import (
    TrainConfig,
    prepare_training_data,
    pretrain_loop,
    stream_rng,
)
from .samplers import SamplerSchedule
from .scenes import scene_cell_classes
from .vocab import VocabConfig, kmeans_fit, load_codebook, purity, quantize, save_codebook


class ConfigError(ValueError):
    """Bad or missing configuration (CLI exit code 2)."""


class ArtifactError(RuntimeError):
    """Missing or mismatched upstream artifact (CLI exit code 3)."""


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSchedule = field(default_factory=SamplerSchedule)
    eval_captions: int = 500
    retrieval_sets: int = 100
    is_splits: int = 10
    ablate_seeds: int = 5

    def __post_init__(self):
        # the model's visual vocabulary must match the codebook size
        if self.model.visual_vocab != self.vocab.k:
            self.model = replace(self.model, visual_vocab=self.vocab.k)
        if self.model.grid_n != self.data.grid_n:
            raise ConfigError("model.grid_n and data.grid_n disagree")
        if self.model.feature_dim != self.data.feature_dim:
            raise ConfigError("model.feature_dim and data.feature_dim disagree")
        mode = self.model.visual_mode
        if self.train.visual_objective == "ccc" and mode != "discrete":
            raise ConfigError("ccc objective requires discrete visual mode")
        if self.train.visual_objective == "mvfr" and mode != "continuous":
            raise ConfigError("mvfr objective requires continuous visual mode")


_SECTION_TYPES = {
    "data": DataConfig,
    "vocab": VocabConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sampler": SamplerSchedule,
}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    kwargs = {}
    for name, typ in _SECTION_TYPES.items():
        section = d.pop(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be an object")
        known = {f.name for f in dataclasses.fields(typ)}
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
        if name == "data" and "kind_weights" in section:
            section["kind_weights"] = tuple(section["kind_weights"])
        kwargs[name] = typ(**section)
    known_top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(d) - known_top
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return ExperimentConfig(**kwargs, **d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"bad config JSON: {e}") from e
    return config_from_dict(d)


def save_config(path, cfg: ExperimentConfig):
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def _hash_sections(cfg: ExperimentConfig, names) -> str:
    payload = {"seed": cfg.seed}
    for name in names:
        payload[name] = dataclasses.asdict(getattr(cfg, name))
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def data_hash(cfg: ExperimentConfig) -> str:
    return _hash_sections(cfg, ("data",))


def vocab_hash(cfg: ExperimentConfig) -> str:
    return _hash_sections(cfg, ("data", "vocab"))


def core_hash(cfg: ExperimentConfig) -> str:
    """Hash of the artifact-generating portion: data/vocab/model/train/seed.

    Sampler and metrics knobs are evaluation-time choices and deliberately
    excluded so one checkpoint serves several sampling strategies.
    """
    return _hash_sections(cfg, ("data", "vocab", "model", "train"))


def full_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# artifact paths


def dataset_prefix(cfg, split):
    return os.path.join(cfg.out_dir, "dataset", split)


def manifest_path(cfg):
    return os.path.join(cfg.out_dir, "dataset", "manifest.json")


def codebook_path(cfg):
    return os.path.join(cfg.out_dir, "codebook.gpvoc")


def checkpoint_path(cfg):
    return os.path.join(cfg.out_dir, "model", "final.gpckpt")


def _require(path):
    if not os.path.exists(path):
        raise ArtifactError(f"missing upstream artifact: {path}")
    return path


def _hash_to_tensor(hash_hex: str) -> np.ndarray:
    return np.array([float(b) for b in bytes.fromhex(hash_hex)], dtype=np.float32)


def _hash_from_tensor(arr) -> str:
    return bytes(int(v) for v in arr).hex()


# ---------------------------------------------------------------------------
# pipeline steps


def cmd_make_data(cfg: ExperimentConfig) -> dict:
    """Generate train/eval records, the feature sidecars, and the manifest."""
    rng = stream_rng(cfg.seed, "data")
    train = build_records(cfg.data, rng, cfg.data.train_records)
    evals = build_records(cfg.data, rng, cfg.data.eval_records,
                          id_offset=cfg.data.train_records)
    os.makedirs(os.path.join(cfg.out_dir, "dataset"), exist_ok=True)
    save_records(dataset_prefix(cfg, "train"), train, cfg.data.grid_n,
                 cfg.data.feature_dim)
    save_records(dataset_prefix(cfg, "eval"), evals, cfg.data.grid_n,
                 cfg.data.feature_dim)
    counts = {"train": len(train), "eval": len(evals)}
    write_manifest(manifest_path(cfg), cfg.data, data_hash(cfg), counts)
    return counts


def _check_manifest(cfg):
    path = _require(manifest_path(cfg))
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("config_hash") != data_hash(cfg):
        raise ArtifactError(
            f"dataset at {path} was built from a different config "
            f"({manifest.get('config_hash')} != {data_hash(cfg)})")
    return manifest


def cmd_build_vocab(cfg: ExperimentConfig) -> dict:
    """Fit the k-means codebook on train features; report inertia/purity."""
    _check_manifest(cfg)
    _require(dataset_prefix(cfg, "train") + ".feat")
    records = load_records(dataset_prefix(cfg, "train"))
    feats = np.stack([r.features.reshape(-1, cfg.data.feature_dim)
                      for r in records]).reshape(-1, cfg.data.feature_dim)
    codebook = kmeans_fit(feats, cfg.vocab.k, cfg.vocab.iterations,
                          seed=cfg.seed, subsample=cfg.vocab.subsample)
    labels = np.concatenate([scene_cell_classes(r.scene).reshape(-1)
                             for r in records])
    pur = purity(quantize(feats, codebook), labels)
    save_codebook(codebook_path(cfg), codebook,
                  extra_meta={"config_hash": vocab_hash(cfg), "purity": pur})
    return {"inertia": codebook.inertia, "purity": pur, "k": codebook.k}


def load_pipeline_codebook(cfg):
    cb, meta = load_codebook(_require(codebook_path(cfg)))
    if meta.get("config_hash") != vocab_hash(cfg):
        raise ArtifactError("codebook was built from a different config")
    return cb


def cmd_pretrain(cfg: ExperimentConfig) -> dict:
    """Train the model; write checkpoint, frozen config copy, and loss log."""
    _check_manifest(cfg)
    codebook = load_pipeline_codebook(cfg)
    records = load_records(dataset_prefix(cfg, "train"))
    data = prepare_training_data(records, codebook, cfg.data.max_text_len)
    model = CrossModalModel(cfg.model, stream_rng(cfg.seed, "init"))
    train_cfg = replace(cfg.train, seed=cfg.seed)
    model_dir = os.path.join(cfg.out_dir, "model")
    os.makedirs(model_dir, exist_ok=True)

    def save_ckpt(step, m, path=None):
        tensors = dict(m.state_dict())
        tensors["__meta__/config_hash"] = _hash_to_tensor(core_hash(cfg))
        save_tensors(path or checkpoint_path(cfg), tensors)

    log = pretrain_loop(train_cfg, data, model,
                        log_path=os.path.join(model_dir, "train_log.csv"),
                        checkpoint_fn=save_ckpt)
    save_config(os.path.join(model_dir, "config.json"), cfg)
    losses = [row.get("ccc", row.get("mvfr")) for row in log
              if row["task"] == "image_mask"]
    return {"steps": len(log), "final_image_loss": losses[-1] if losses else None}


def load_pipeline_model(cfg) -> CrossModalModel:
    tensors = load_tensors(_require(checkpoint_path(cfg)))
    stored = tensors.pop("__meta__/config_hash", None)
    if stored is None or _hash_from_tensor(stored) != core_hash(cfg):
        raise ArtifactError("checkpoint was trained under a different config")
    model = CrossModalModel(cfg.model, stream_rng(cfg.seed, "init"))
    model.load_state_dict(tensors)
    return model
