"""AdamW with decoupled weight decay, global-norm clipping, linear warmup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus shared hyperparameters."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class AdamW:
    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        self.params = list(params)
        self.state = OptimizerState(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr_scale: float = 1.0):
        """One decoupled-weight-decay Adam update; t incremented first."""
        s = self.state
        s.t += 1
        lr = s.lr * lr_scale
        bc1 = 1.0 - s.beta1 ** s.t
        bc2 = 1.0 - s.beta2 ** s.t
        for p, m, v in zip(self.params, s.m, s.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            if s.weight_decay:
                p.data *= np.float32(1.0 - lr * s.weight_decay)
            p.data -= np.float32(lr) * (mhat / (np.sqrt(vhat) + s.eps))


def clip_grad_global_norm(params, max_norm: float = 1.0) -> float:
    """Scale all grads so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = np.float32(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def warmup_scale(t: int, warmup_steps: int) -> float:
    """Linear warmup multiplier: t / warmup_steps capped at 1."""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, t / warmup_steps)
