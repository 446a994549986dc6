"""Sampling + evaluation pipeline and the ablation grid.

Semantic accuracy is the exact grammar oracle on decoded generations; FID,
the class-probability score, and R-precision ride on surrogates (a frozen
encoder checkpoint for h_cls features and ITM scoring, and a small attribute
classifier fit once on the train split). Ablation rows pin the surrogate to
each seed's fully-refined checkpoint so rows within a seed are comparable.
"""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .experiment import (
    ArtifactError,
    ExperimentConfig,
    cmd_build_vocab,
    cmd_make_data,
    cmd_pretrain,
    codebook_path,
    core_hash,
    dataset_prefix,
    full_hash,
    load_pipeline_codebook,
    load_pipeline_model,
    _require,
)
from .dataset import load_records
from .metrics import (
    HARD_CATEGORIES,
    RetrievalSet,
    build_hard_negatives,
    fid,
    inception_score,
    r_precision,
    semantic_accuracy,
)
from .model import CrossModalModel
from .optim import AdamW
from .pretrain import stream_rng
from .render import render_classes, render_png, write_png
from .samplers import SamplerSchedule, sample_grids
from .scenes import (
    BACKGROUND_CLASS,
    CLS,
    EOS,
    FeatureGrid,
    N_CLASSES,
    PAD,
    classify_features,
    oracle_check,
    scene_cell_classes,
)
from .tensor import Tape, Tensor, add, backward, cross_entropy_from_logits, matmul
from .vocab import max_cluster_radius, quantize, reconstruct

_EVAL_CHUNK = 125

VARIANTS = (
    ("full", "ccc", "uniform", True),
    ("no_discrete", "mvfr", "uniform", True),
    ("no_uniform", "ccc", "bernoulli", True),
    ("no_filter", "ccc", "uniform", False),
    ("no_discrete+no_uniform", "mvfr", "bernoulli", True),
    ("no_discrete+no_filter", "mvfr", "uniform", False),
    ("no_uniform+no_filter", "ccc", "bernoulli", False),
    ("no_discrete+no_uniform+no_filter", "mvfr", "bernoulli", False),
)

SAMPLER_ROWS = ("mask_predict_4", "tlbr", "random", "mask_predict_1")


def pad_captions(captions, max_len) -> np.ndarray:
    out = np.full((len(captions), max_len), PAD, dtype=np.int64)
    for i, c in enumerate(captions):
        out[i, : len(c)] = c
    return out


def variant_config(cfg: ExperimentConfig, label: str) -> ExperimentConfig:
    for name, objective, masking, filt in VARIANTS:
        if name == label:
            break
    else:
        raise ValueError(f"unknown variant {label!r}")
    mode = "discrete" if objective == "ccc" else "continuous"
    return replace(
        cfg,
        out_dir=os.path.join(cfg.out_dir, "variants", label),
        model=replace(cfg.model, visual_mode=mode),
        train=replace(cfg.train, visual_objective=objective, masking=masking,
                      ccc_data_filter=filt),
    )


def generate_grids(model, captions_padded, schedule: SamplerSchedule,
                   codebook, rng, chunk=_EVAL_CHUNK):
    """Run the sampler over a caption batch in fixed-size chunks."""
    parts = []
    for lo in range(0, captions_padded.shape[0], chunk):
        parts.append(sample_grids(model, captions_padded[lo : lo + chunk],
                                  schedule, codebook, rng))
    return np.concatenate(parts, axis=0)


def generations_as_feature_grids(result, codebook, grid_n, dim):
    """Sampled ids or raw features -> FeatureGrid list for the oracle."""
    grids = []
    for row in result:
        if row.ndim == 1:
            feats = reconstruct(row, codebook).reshape(grid_n, grid_n, dim)
        else:
            feats = row.reshape(grid_n, grid_n, dim)
        grids.append(FeatureGrid(grid_n=grid_n, dim=dim, features=feats))
    return grids


def _as_surrogate_ids(result, codebook):
    if result.ndim == 2:
        return result
    return quantize(result, codebook)


def _empty_captions(n, max_len):
    caps = np.full((n, max_len), PAD, dtype=np.int64)
    caps[:, 0] = CLS
    caps[:, 1] = EOS
    return caps


def hcls_features(surrogate: CrossModalModel, grid_ids, chunk=512) -> np.ndarray:
    """Frozen-encoder h_cls of each grid with an empty caption."""
    feats = []
    max_len = surrogate.config.max_text_len
    for lo in range(0, grid_ids.shape[0], chunk):
        ids = grid_ids[lo : lo + chunk]
        out = surrogate.encode(ids, _empty_captions(ids.shape[0], max_len))
        feats.append(out.h_cls.data.copy())
    return np.concatenate(feats, axis=0)


def itm_probs(surrogate: CrossModalModel, grid_ids, captions_padded,
              chunk=512) -> np.ndarray:
    probs = []
    for lo in range(0, grid_ids.shape[0], chunk):
        out = surrogate.encode(grid_ids[lo : lo + chunk],
                               captions_padded[lo : lo + chunk])
        probs.append(surrogate.itm_score(out.h_cls).data.reshape(-1).copy())
    return np.concatenate(probs)


def train_attribute_classifier(records, dim, seed, steps=300, lr=0.05):
    """Softmax regression: mean-pooled cell features -> one object's class.

    Fit once per dataset with a fixed stream; the returned weights are the
    frozen surrogate for the diversity score.
    """
    rng = stream_rng(seed, "metrics")
    x = np.stack([r.features.reshape(-1, dim).mean(axis=0) for r in records])
    labels = np.empty(len(records), dtype=np.int64)
    for i, r in enumerate(records):
        cells = scene_cell_classes(r.scene).reshape(-1)
        objs = np.flatnonzero(cells != BACKGROUND_CLASS)
        labels[i] = cells[rng.choice(objs)]
    w = Tensor(np.zeros((dim, N_CLASSES), dtype=np.float32), requires_grad=True)
    b = Tensor(np.zeros(N_CLASSES, dtype=np.float32), requires_grad=True)
    opt = AdamW([w, b], lr=lr)
    xt = Tensor(x.astype(np.float32))
    for _ in range(steps):
        with Tape():
            logits = add(matmul(xt, w), b)
            loss = cross_entropy_from_logits(logits, labels)
            opt.zero_grad()
            backward(loss)
        opt.step()
    return {"w": w.data.copy(), "b": b.data.copy()}


def attribute_probs(classifier, pooled) -> np.ndarray:
    z = pooled.astype(np.float64) @ classifier["w"].astype(np.float64) \
        + classifier["b"].astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def _pooled(result, codebook, dim):
    if result.ndim == 2:
        feats = reconstruct(result, codebook)
    else:
        feats = result
    return feats.reshape(result.shape[0], -1, dim).mean(axis=1)


def chance_rate(records, rng, n_pairs=2000) -> float:
    """Oracle rate of randomly re-paired (scene, caption) records."""
    n = len(records)
    i = rng.integers(0, n, size=n_pairs)
    off = rng.integers(1, n, size=n_pairs)
    j = (i + off) % n
    return float(np.mean([
        oracle_check(records[a].scene, records[b].caption)
        for a, b in zip(i, j)
    ]))


def evaluate(cfg: ExperimentConfig, model=None, codebook=None,
             surrogate=None, strategy_label=None) -> dict:
    """Full metric report for one trained experiment."""
    if codebook is None:
        codebook = load_pipeline_codebook(cfg)
    if model is None:
        model = load_pipeline_model(cfg)
    if surrogate is None:
        surrogate = model if model.config.visual_mode == "discrete" else None
    _require(dataset_prefix(cfg, "train") + ".jsonl")
    _require(dataset_prefix(cfg, "eval") + ".jsonl")
    train_records = load_records(dataset_prefix(cfg, "train"))
    eval_records = load_records(dataset_prefix(cfg, "eval"))
    cond = [r for r in eval_records if r.kind != "question"][: cfg.eval_captions]
    caps = pad_captions([r.caption for r in cond], cfg.data.max_text_len)

    schedule = replace(cfg.sampler, seed=cfg.seed)
    rng = stream_rng(cfg.seed, "sampler")
    result = generate_grids(model, caps, schedule, codebook, rng)

    grid_n, dim = cfg.data.grid_n, cfg.data.feature_dim
    gen_grids = generations_as_feature_grids(result, codebook, grid_n, dim)
    acc = semantic_accuracy(zip(gen_grids, (r.caption for r in cond)))

    rng_metrics = stream_rng(cfg.seed, "metrics")
    chance = chance_rate(cond, rng_metrics)

    report = {
        "core_hash": core_hash(cfg),
        "config_hash": full_hash(cfg),
        "strategy": strategy_label or cfg.sampler.strategy,
        "seed": cfg.seed,
        "eval_captions": len(cond),
        "semantic_accuracy": acc,
        "chance_rate": chance,
    }

    train_feats = np.stack([r.features for r in train_records]).reshape(-1, dim)
    if model.config.visual_mode == "continuous":
        d2min = ((result.reshape(-1, 1, dim).astype(np.float64)
                  - codebook.centroids[None].astype(np.float64)) ** 2).sum(-1).min(1)
        report["feature_drift_mean"] = float(np.sqrt(d2min).mean())
        report["max_cluster_radius"] = max_cluster_radius(train_feats, codebook)

    if surrogate is not None:
        gen_ids = _as_surrogate_ids(result, codebook)
        real_ids = np.stack([quantize(r.features, codebook).reshape(-1)
                             for r in cond])
        report["fid"] = fid(hcls_features(surrogate, gen_ids),
                            hcls_features(surrogate, real_ids))

        classifier = train_attribute_classifier(train_records, dim, cfg.seed)
        probs = attribute_probs(classifier, _pooled(result, codebook, dim))
        is_mean, is_std = inception_score(probs, splits=cfg.is_splits)
        report["is_mean"], report["is_std"] = is_mean, is_std

        report.update(_retrieval_metrics(cfg, surrogate, gen_ids, cond))
    return report


def _retrieval_metrics(cfg, surrogate, gen_ids, cond) -> dict:
    rng = stream_rng(cfg.seed, "metrics")
    max_len = cfg.data.max_text_len
    out = {}

    # easy: 99 negatives drawn from other records' captions
    n_sets = min(cfg.retrieval_sets, len(cond))
    sets, pair_grids, pair_caps = [], [], []
    score_map = {}
    for si in range(n_sets):
        donors = rng.integers(0, len(cond) - 1, size=99)
        donors = donors + (donors >= si)
        negs = [tuple(cond[int(d)].caption) for d in donors]
        sets.append(RetrievalSet(positive=tuple(cond[si].caption),
                                 negatives=negs, grid=si, kind="easy"))
        for cap in [tuple(cond[si].caption)] + negs:
            pair_grids.append(gen_ids[si])
            pair_caps.append(list(cap))
    probs = itm_probs(surrogate, np.stack(pair_grids),
                      pad_captions(pair_caps, max_len))
    k = 0
    for si in range(n_sets):
        for cap in [sets[si].positive] + sets[si].negatives:
            score_map[(si, cap)] = probs[k]
            k += 1
    out["r_prec_easy"] = r_precision(lambda g, c: score_map[(g, tuple(c))], sets)

    # hard: same-category one-word swaps
    for category in HARD_CATEGORIES:
        sets, pair_grids, pair_caps = [], [], []
        for si in range(len(cond)):
            if len(sets) >= cfg.retrieval_sets:
                break
            try:
                negs = build_hard_negatives(cond[si].caption, category, rng)
            except ValueError:
                continue
            negs = [tuple(n) for n in negs]
            sets.append(RetrievalSet(positive=tuple(cond[si].caption),
                                     negatives=negs, grid=si, kind="hard",
                                     category=category))
            for cap in [tuple(cond[si].caption)] + negs:
                pair_grids.append(gen_ids[si])
                pair_caps.append(list(cap))
        if not sets:
            out[f"r_prec_hard_{category}"] = None
            continue
        probs = itm_probs(surrogate, np.stack(pair_grids),
                          pad_captions(pair_caps, max_len))
        score_map = {}
        k = 0
        for si, s in enumerate(sets):
            for cap in [s.positive] + s.negatives:
                score_map[(s.grid, cap)] = probs[k]
                k += 1
        out[f"r_prec_hard_{category}"] = r_precision(
            lambda g, c: score_map[(g, tuple(c))], sets)
    return out


def write_report(cfg, report, name="report"):
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, f"{name}.json")
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    cols = sorted(report)
    with open(os.path.join(cfg.out_dir, f"{name}.csv"), "w") as f:
        f.write(",".join(cols) + "\n")
        f.write(",".join(str(report[c]) for c in cols) + "\n")
    return path


def cmd_eval(cfg: ExperimentConfig) -> dict:
    report = evaluate(cfg)
    write_report(cfg, report)
    return report


def cmd_sample(cfg: ExperimentConfig, n_samples=8) -> list:
    """Sample grids for a few eval captions; write records and PNGs."""
    codebook = load_pipeline_codebook(cfg)
    model = load_pipeline_model(cfg)
    eval_records = load_records(dataset_prefix(cfg, "eval"))
    cond = [r for r in eval_records if r.kind != "question"][:n_samples]
    caps = pad_captions([r.caption for r in cond], cfg.data.max_text_len)
    schedule = replace(cfg.sampler, seed=cfg.seed)
    rng = stream_rng(cfg.seed, "sampler")
    result = generate_grids(model, caps, schedule, codebook, rng)

    sample_dir = os.path.join(cfg.out_dir, "samples")
    os.makedirs(sample_dir, exist_ok=True)
    paths = []
    with open(os.path.join(sample_dir, "samples.jsonl"), "w") as f:
        for i, r in enumerate(cond):
            row = result[i]
            if row.ndim == 1:
                ids = row.reshape(cfg.data.grid_n, cfg.data.grid_n)
                png = render_png(ids, codebook)
                ids_list = [int(v) for v in row]
            else:
                classes = classify_features(
                    row.reshape(cfg.data.grid_n, cfg.data.grid_n, -1))
                png = write_png(render_classes(classes))
                ids_list = [int(v) for v in quantize(row, codebook)]
            png_path = os.path.join(sample_dir, f"sample_{i:03d}.png")
            with open(png_path, "wb") as pf:
                pf.write(png)
            paths.append(png_path)
            f.write(json.dumps({
                "record_id": r.record_id,
                "caption": r.caption,
                "kind": r.kind,
                "strategy": schedule.strategy,
                "k_iters": schedule.k_iters,
                "temperature": schedule.temperature,
                "seed": cfg.seed,
                "grid_ids": ids_list,
                "core_hash": core_hash(cfg),
            }, sort_keys=True) + "\n")
    return paths


# ---------------------------------------------------------------------------
# ablation grid


def _sampler_schedule_for_row(row: str, t_cells: int) -> SamplerSchedule:
    if row == "mask_predict_4":
        return SamplerSchedule(strategy="mask_predict", k_iters=4)
    if row == "mask_predict_1":
        return SamplerSchedule(strategy="mask_predict", k_iters=1)
    if row == "tlbr":
        return SamplerSchedule(strategy="tlbr")
    # paper-proportional revisit budget: 140 steps on an 8x8 grid
    return SamplerSchedule(strategy="random",
                           steps=int(round(140 / 64 * t_cells)))


def run_pipeline(cfg: ExperimentConfig) -> dict:
    """make-data -> build-vocab -> pretrain -> eval for one config."""
    cmd_make_data(cfg)
    cmd_build_vocab(cfg)
    cmd_pretrain(cfg)
    return cmd_eval(cfg)


def _ablate_seed_job(cfg_dict: dict, seed: int) -> dict:
    from .experiment import config_from_dict
    base = config_from_dict(cfg_dict)
    base = replace(base, seed=seed,
                   out_dir=os.path.join(base.out_dir, f"seed{seed}"))
    cmd_make_data(base)
    cmd_build_vocab(base)
    codebook = load_pipeline_codebook(base)

    results = {}
    surrogate = None
    for label, *_ in VARIANTS:
        vcfg = variant_config(base, label)
        os.makedirs(vcfg.out_dir, exist_ok=True)
        _link_shared_artifacts(base, vcfg)
        cmd_pretrain(vcfg)
        model = load_pipeline_model(vcfg)
        if label == "full":
            surrogate = model
        report = evaluate(vcfg, model=model, codebook=codebook,
                          surrogate=surrogate)
        write_report(vcfg, report)
        results[label] = report
        if label == "full":
            for row in SAMPLER_ROWS:
                scfg = replace(vcfg, sampler=_sampler_schedule_for_row(
                    row, vcfg.model.grid_cells))
                rep = evaluate(scfg, model=model, codebook=codebook,
                               surrogate=surrogate, strategy_label=row)
                results[f"sampler:{row}"] = rep
    return results


def _link_shared_artifacts(base, vcfg):
    """Variants share the seed's dataset and codebook via symlinks; the
    data- and vocab-level hashes are identical across variants."""
    for rel in ("dataset", "codebook.gpvoc"):
        src = os.path.join(base.out_dir, rel)
        dst = os.path.join(vcfg.out_dir, rel)
        if not os.path.exists(dst):
            os.symlink(os.path.abspath(src), dst)


def cmd_ablate(cfg: ExperimentConfig, workers: int | None = None) -> list:
    """2x2x2 refinement grid plus four sampler rows, each over >=5 seeds."""
    seeds = [cfg.seed + i for i in range(cfg.ablate_seeds)]
    if workers is None:
        workers = int(os.environ.get("GRIDPAINT_THREADS", "0")) or \
            min(4, os.cpu_count() or 1)
    workers = min(workers, len(seeds))
    cfg_dict = dataclasses.asdict(cfg)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_ablate_seed_job,
                                     [cfg_dict] * len(seeds), seeds))
    else:
        per_seed = [_ablate_seed_job(cfg_dict, s) for s in seeds]

    rows = []
    labels = [v[0] for v in VARIANTS] + [f"sampler:{r}" for r in SAMPLER_ROWS]
    for label in labels:
        accs = [ps[label]["semantic_accuracy"] for ps in per_seed]
        row = {
            "row": label,
            "kind": "sampler" if label.startswith("sampler:") else "refinement",
            "acc_mean": float(np.mean(accs)),
            "acc_std": float(np.std(accs)),
            "acc_per_seed": accs,
        }
        for metric in ("fid", "is_mean", "r_prec_easy", "chance_rate",
                       "feature_drift_mean", "max_cluster_radius"):
            vals = [ps[label].get(metric) for ps in per_seed]
            if all(v is not None for v in vals):
                row[metric + "_mean"] = float(np.mean(vals))
        rows.append(row)

    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "ablation.json"), "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
        f.write("\n")
    cols = ["row", "kind", "acc_mean", "acc_std", "fid_mean", "is_mean_mean",
            "r_prec_easy_mean"]
    with open(os.path.join(cfg.out_dir, "ablation.csv"), "w") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(str(row.get(c, "")) for c in cols) + "\n")
    return rows
