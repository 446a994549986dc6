"""Generator/discriminator loss formulas over tensors; no GAN training.

Standalone, differentiable building blocks: hinge adversarial terms (standard
sign convention: the discriminator pushes fake scores below -1 and real
scores above +1), per-cell classification of cluster-id layouts, and huber
feature matching, plus the weighted totals with defaults (1, 1, 10, 10).
Feature providers are pluggable: any aligned list of tensors works.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    add,
    cross_entropy_from_logits,
    huber,
    relu,
    reshape,
    scale,
    tmean,
)


@dataclass
class LossWeights:
    adv: float = 1.0
    acgan: float = 1.0
    fm: float = 10.0
    fm_e: float = 10.0

    def __post_init__(self):
        if min(self.adv, self.acgan, self.fm, self.fm_e) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class GanLossParts:
    adv_g: Tensor
    adv_d: Tensor
    acgan: Tensor
    fm: Tensor
    fm_e: Tensor


def hinge_g(d_fake: Tensor) -> Tensor:
    """Generator adversarial term: mean of negated fake scores."""
    return tmean(scale(d_fake, -1.0))


def hinge_d(d_fake: Tensor, d_real: Tensor) -> Tensor:
    """mean(max(1 + D(fake), 0)) + mean(max(1 - D(real), 0))."""
    fake_term = tmean(relu(add(d_fake, Tensor(1.0))))
    real_term = tmean(relu(add(scale(d_real, -1.0), Tensor(1.0))))
    return add(fake_term, real_term)


def acgan_loss(cls_logits_fake: Tensor, cls_logits_real: Tensor,
               target_ids) -> Tensor:
    """Mean per-cell NLL of the target cluster ids, fake term + real term."""
    ids = np.asarray(target_ids, dtype=np.int64).reshape(-1)
    k = cls_logits_fake.data.shape[-1]
    if cls_logits_fake.data.shape != cls_logits_real.data.shape:
        raise ValueError("fake/real logit shapes differ")
    if ids.size != cls_logits_fake.data.size // k:
        raise ValueError("target grid does not match logit layout")
    fake = cross_entropy_from_logits(reshape(cls_logits_fake, (-1, k)), ids)
    real = cross_entropy_from_logits(reshape(cls_logits_real, (-1, k)), ids)
    return add(fake, real)


def feature_match_loss(fake_stack, real_stack) -> Tensor:
    """Sum over blocks of the mean elementwise huber of differences.

    Serves both the discriminator feature-matching term and the perceptual
    term; only the feature provider differs.
    """
    fake_stack = list(fake_stack)
    real_stack = list(real_stack)
    if len(fake_stack) != len(real_stack):
        raise ValueError("stacks have different block counts")
    total = None
    for f, r in zip(fake_stack, real_stack):
        if f.data.shape != r.data.shape:
            raise ValueError(f"block shape mismatch: {f.data.shape} vs {r.data.shape}")
        term = tmean(huber(add(f, scale(r, -1.0))))
        total = term if total is None else add(total, term)
    if total is None:
        raise ValueError("empty feature stacks")
    return total


def total_losses(parts: GanLossParts, weights: LossWeights = LossWeights()):
    """Weighted sums: L_G over (adv, acgan, fm, fm_e); L_D over (adv, acgan)."""
    for name in ("adv_g", "adv_d", "acgan", "fm", "fm_e"):
        t = getattr(parts, name)
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"non-finite loss part {name}")
    l_g = add(
        add(scale(parts.adv_g, weights.adv), scale(parts.acgan, weights.acgan)),
        add(scale(parts.fm, weights.fm), scale(parts.fm_e, weights.fm_e)),
    )
    l_d = add(scale(parts.adv_d, weights.adv), scale(parts.acgan, weights.acgan))
    return l_g, l_d
