"""Generation metrics: FID, inception-style score, R-precision, oracle rate.

FID uses the symmetric-product formulation with matrix square roots from a
symmetric eigendecomposition (eigenvalues clamped at zero) and the unbiased
covariance estimator. The class-probability score ("inception score" shape)
and the retrieval metrics take pluggable surrogates; semantic accuracy is the
exact grammar oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenes import (
    CLS,
    COLORS,
    EOS,
    NUMBER_WORDS,
    SHAPES,
    WORD_TO_ID,
    caption_words,
    oracle_check,
)

HARD_CATEGORIES = ("color", "shape", "count")
_CATEGORY_WORDS = {
    "color": COLORS,
    "shape": SHAPES,
    "count": NUMBER_WORDS,
}


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int


@dataclass
class RetrievalSet:
    positive: list          # caption token ids
    negatives: list         # list of caption token lists
    grid: object            # whatever the scorer consumes
    kind: str = "easy"      # or "hard"
    category: str | None = None


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be (n, d)")
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"need at least d+1={d + 1} samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite features")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (n - 1)
    return GaussianStats(mean=mu, cov=cov, count=n)


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, eigenvalues
    clamped at zero."""
    m = np.asarray(m, dtype=np.float64)
    sym = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    a = gaussian_stats(features_a)
    b = gaussian_stats(features_b)
    sqrt_a = matrix_sqrt_psd(a.cov)
    inner = matrix_sqrt_psd(sqrt_a @ b.cov @ sqrt_a)
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov)
                  - 2.0 * np.trace(inner))
    if not np.isfinite(value):
        raise ValueError("non-finite FID")
    return max(value, 0.0)


def inception_score(cond_probs: np.ndarray, splits: int = 10):
    """exp of the mean KL(p(y|x) || p(y)) per split; returns (mean, std)."""
    p = np.asarray(cond_probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("cond_probs must be (n, classes)")
    if splits < 1 or splits > p.shape[0]:
        raise ValueError("invalid split count")
    if (p < -1e-9).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-5:
        raise ValueError("rows must be probability distributions")
    scores = []
    for part in np.array_split(p, splits):
        py = part.mean(axis=0)
        ratio = np.where(part > 0, part / np.maximum(py, 1e-300), 1.0)
        kl = (np.where(part > 0, part * np.log(ratio), 0.0)).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


def build_hard_negatives(caption, category: str, rng: np.random.Generator,
                         limit: int = 9) -> list:
    """Same-category one-word swaps of the caption, up to `limit` distinct
    negatives (the small closed vocabulary caps how many exist)."""
    if category not in HARD_CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    vocab = _CATEGORY_WORDS[category]
    words = caption_words(caption)
    positions = [i for i, w in enumerate(words) if w in vocab]
    if not positions:
        raise ValueError(f"caption has no {category} word")
    swaps = []
    for i in positions:
        for alt in vocab:
            if alt != words[i]:
                swaps.append((i, alt))
    order = rng.permutation(len(swaps))
    negatives = []
    for j in order[: min(limit, len(swaps))]:
        i, alt = swaps[j]
        new_words = list(words)
        new_words[i] = alt
        negatives.append([CLS] + [WORD_TO_ID[w] for w in new_words] + [EOS])
    return negatives


def r_precision(scorer, sets) -> float:
    """Fraction of sets whose positive caption is strictly top-1 by score;
    ties count as failures."""
    sets = list(sets)
    if not sets:
        raise ValueError("no retrieval sets")
    hits = 0
    for s in sets:
        pos = scorer(s.grid, s.positive)
        if all(pos > scorer(s.grid, neg) for neg in s.negatives):
            hits += 1
    return hits / len(sets)


def semantic_accuracy(pairs) -> float:
    """Mean oracle_check over (scene_or_grid, caption) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs")
    return float(np.mean([oracle_check(g, c) for g, c in pairs]))
