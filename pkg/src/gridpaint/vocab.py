"""Discrete visual vocabulary: k-means codebook over grid features.

k-means++ initialization followed by Lloyd iterations; empty clusters are
reseeded to the point farthest from its assigned centroid. Inertia is
asserted non-increasing on every fit. Codebook files carry magic "GPVOC1",
k and dim as little-endian u32, the f32 centroid payload, and a trailing
JSON metadata block.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

VOCAB_MAGIC = b"GPVOC1"


@dataclass
class VocabConfig:
    k: int = 32
    iterations: int = 20
    subsample: int | None = None  # fit on all points by default


@dataclass
class Codebook:
    k: int
    dim: int
    centroids: np.ndarray  # (k, dim) float32
    iterations: int
    inertia: float
    seed: int


def _dist2(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    p2 = (points.astype(np.float64) ** 2).sum(1)[:, None]
    c2 = (centroids.astype(np.float64) ** 2).sum(1)[None, :]
    cross = points.astype(np.float64) @ centroids.astype(np.float64).T
    return np.maximum(p2 + c2 - 2.0 * cross, 0.0)


def kmeans_pp_indices(points: np.ndarray, k: int, rng: np.random.Generator) -> list:
    """k-means++ seeding: first pick uniform, then proportional to squared
    distance to the nearest chosen point."""
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points.astype(np.float64) - points[chosen[0]].astype(np.float64)) ** 2).sum(1)
    for _ in range(k - 1):
        total = d2.sum()
        if total <= 0:
            raise ValueError("fewer distinct points than clusters")
        idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        cand = ((points.astype(np.float64) - points[idx].astype(np.float64)) ** 2).sum(1)
        d2 = np.minimum(d2, cand)
    return chosen


def kmeans_fit(points: np.ndarray, k: int, iterations: int = 20, seed: int = 0,
               subsample: int | None = None) -> Codebook:
    points = np.ascontiguousarray(points, dtype=np.float32).reshape(-1, points.shape[-1])
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if subsample is not None and subsample < points.shape[0]:
        idx = rng.choice(points.shape[0], size=subsample, replace=False)
        points = points[np.sort(idx)]
    if np.unique(points, axis=0).shape[0] < k:
        raise ValueError("fewer distinct points than clusters")

    centroids = points[kmeans_pp_indices(points, k, rng)].astype(np.float64)
    prev_inertia = np.inf
    inertia = np.inf
    for _ in range(iterations):
        d2 = _dist2(points, centroids)
        assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(points.shape[0]), assign].sum())
        if inertia > prev_inertia * (1 + 1e-9) + 1e-9:
            raise AssertionError("Lloyd inertia increased")
        prev_inertia = inertia
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros((k, points.shape[1]), dtype=np.float64)
        np.add.at(sums, assign, points.astype(np.float64))
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        empties = np.flatnonzero(~nonempty)
        if empties.size:
            # reseed each empty cluster to the worst-represented point
            own = d2[np.arange(points.shape[0]), assign].copy()
            for j in empties:
                far = int(own.argmax())
                centroids[j] = points[far].astype(np.float64)
                own[far] = -1.0
    d2 = _dist2(points, centroids)
    assign = d2.argmin(axis=1)
    final_inertia = float(d2[np.arange(points.shape[0]), assign].sum())
    return Codebook(k=k, dim=points.shape[1],
                    centroids=centroids.astype(np.float32),
                    iterations=iterations, inertia=final_inertia, seed=seed)


def quantize(features: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid ids for (..., dim) features; ties go to the lowest id."""
    feats = np.asarray(features)
    if feats.shape[-1] != codebook.dim:
        raise ValueError("feature dim does not match codebook")
    flat = feats.reshape(-1, codebook.dim)
    ids = _dist2(flat, codebook.centroids).argmin(axis=1)
    return ids.reshape(feats.shape[:-1])


def reconstruct(ids: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Centroid lookup: (...,) ids -> (..., dim) features."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= codebook.k):
        raise ValueError("cluster id out of range")
    return codebook.centroids[ids]


def purity(assignments, labels) -> float:
    """Sum over clusters of the majority label count, over the total."""
    assignments = np.asarray(assignments).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if assignments.shape != labels.shape:
        raise ValueError("length mismatch")
    total = assignments.size
    hit = 0
    for c in np.unique(assignments):
        _, counts = np.unique(labels[assignments == c], return_counts=True)
        hit += int(counts.max())
    return hit / total


def max_cluster_radius(points: np.ndarray, codebook: Codebook) -> float:
    """Largest distance from a training point to its assigned centroid."""
    flat = np.asarray(points, dtype=np.float32).reshape(-1, codebook.dim)
    d2 = _dist2(flat, codebook.centroids)
    return float(np.sqrt(d2.min(axis=1).max()))


def save_codebook(path, codebook: Codebook, extra_meta: dict | None = None):
    meta = {"seed": codebook.seed, "iterations": codebook.iterations,
            "inertia": codebook.inertia}
    if extra_meta:
        meta.update(extra_meta)
    with open(path, "wb") as f:
        f.write(VOCAB_MAGIC)
        f.write(struct.pack("<II", codebook.k, codebook.dim))
        f.write(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())
        f.write(json.dumps(meta, sort_keys=True).encode("utf-8"))


def load_codebook(path) -> tuple:
    """Returns (Codebook, metadata dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(VOCAB_MAGIC)] != VOCAB_MAGIC:
        raise ValueError(f"{path}: bad codebook magic")
    k, dim = struct.unpack_from("<II", blob, len(VOCAB_MAGIC))
    off = len(VOCAB_MAGIC) + 8
    cents = np.frombuffer(blob, dtype="<f4", count=k * dim, offset=off)
    meta = json.loads(blob[off + 4 * k * dim:].decode("utf-8"))
    cb = Codebook(k=k, dim=dim, centroids=cents.reshape(k, dim).copy(),
                  iterations=meta.get("iterations", 0),
                  inertia=meta.get("inertia", float("nan")),
                  seed=meta.get("seed", 0))
    return cb, meta
