"""Minimal dense f32 tensor library with a reverse-mode autodiff tape.

The tape is define-by-run: ops executed inside a ``with Tape():`` block are
recorded in creation order (which is already topological), and ``backward``
replays the records in reverse, accumulating gradients additively. Outside a
tape, every op is plain numpy. A tape is confined to one thread; tensors are
never mutated after creation except for gradient accumulation.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

_SQRT1_2 = float(np.sqrt(0.5))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops: (output, inputs, backward rule)."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, out, inputs, backward_fn):
        self.records.append((out, inputs, backward_fn))


class Tensor:
    """Dense float32 n-d array, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, g, own=False):
        """Add g into grad. own=True hands over a freshly computed array no
        other tensor aliases, skipping the defensive copy."""
        if self.grad is None:
            if own and isinstance(g, np.ndarray) and g.dtype == np.float32:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=np.float32, copy=True)
        else:
            self.grad += g

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _make(data, inputs, backward_fn):
    """Build the op output and record it on the active tape if grads flow."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float32)
    out.grad = None
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out._tape = tape if needs else None
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum grad g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            a.accumulate_grad(ga, own=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            b.accumulate_grad(gb, own=gb is not g)

    return _make(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape), own=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape), own=True)

    return _make(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * c, own=True)

    return _make(a.data * c, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bwd)


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate_grad(g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def slice_axis1(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along axis 1 of a (B, S, ...) tensor."""

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            a.accumulate_grad(full, own=True)

    return _make(a.data[:, start:stop], (a,), bwd)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a 2-d tensor by integer index (axis 0)."""
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a.accumulate_grad(full, own=True)

    return _make(a.data[idx], (a,), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Look up rows of `table` (V, D) by an integer id array."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding id out of range")

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table.accumulate_grad(full, own=True)

    return _make(table.data[ids], (table,), bwd)


def where_mask(mask, a: Tensor, b: Tensor) -> Tensor:
    """mask ? a : b with mask a constant boolean array (broadcastable)."""
    mask = np.asarray(mask, dtype=bool)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(np.where(mask, g, 0.0), a.data.shape),
                              own=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(np.where(mask, 0.0, g), b.data.shape),
                              own=True)

    return _make(np.where(mask, a.data, b.data), (a, b), bwd)


# ---------------------------------------------------------------------------
# matmul and friends


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when inputs have equal leading dims."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.matmul(g, np.swapaxes(b.data, -1, -2)), own=True)
        if b.requires_grad:
            b.accumulate_grad(np.matmul(np.swapaxes(a.data, -1, -2), g), own=True)

    return _make(np.matmul(a.data, b.data), (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (..., in) @ w (in, out) + b (out,)."""
    xd = x.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ w.data + b.data

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x.accumulate_grad((g2 @ w.data.T).reshape(xd.shape), own=True)
        if w.requires_grad:
            w.accumulate_grad(x2.T @ g2, own=True)
        if b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0), own=True)

    return _make(out.reshape(lead + (w.data.shape[1],)), (x, w, b), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not (-xd.ndim <= axis < xd.ndim):
        raise ValueError(f"softmax axis {axis} invalid for shape {xd.shape}")
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            x.accumulate_grad(s * (g - dot), own=True)

    return _make(s, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to mean 0 / var 1, then affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0), own=True)
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0),
                                 own=True)
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gx - m1 - xhat * m2), own=True)

    return _make(out, (x, gain, bias), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x)."""
    xd = x.data
    phi_cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))

    def bwd(g):
        if x.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
            x.accumulate_grad(g * (phi_cdf + xd * pdf), own=True)

    return _make(xd * phi_cdf, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * s * (1.0 - s), own=True)

    return _make(s, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0), own=True)

    return _make(np.maximum(x.data, 0.0), (x,), bwd)


def huber(x: Tensor) -> Tensor:
    """Elementwise 0.5*x^2 for |x| <= 1, |x| - 0.5 otherwise."""
    xd = x.data
    small = np.abs(xd) <= 1.0
    out = np.where(small, 0.5 * xd * xd, np.abs(xd) - 0.5)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * np.clip(xd, -1.0, 1.0), own=True)

    return _make(out, (x,), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return x
    keep = (rng.random(x.data.shape, dtype=np.float32) >= p).astype(np.float32)
    keep /= np.float32(1.0 - p)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * keep, own=True)

    return _make(x.data * keep, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and losses


def tsum(x: Tensor) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g), own=True)

    return _make(x.data.sum(dtype=np.float32), (x,), bwd)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g / n), own=True)

    return _make(x.data.mean(dtype=np.float32), (x,), bwd)


def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    """Mean NLL of `targets` under row-wise softmax of (B, C) logits."""
    targets = np.asarray(targets, dtype=np.int64)
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError("logits must be 2-d (batch, classes)")
    if targets.shape != (ld.shape[0],):
        raise ValueError("targets must be 1-d of length batch")
    if targets.size and (targets.min() < 0 or targets.max() >= ld.shape[1]):
        raise IndexError("target class out of range")
    m = ld.max(axis=1, keepdims=True)
    z = ld - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True)) + m
    nll = lse[:, 0] - ld[np.arange(ld.shape[0]), targets]
    n = ld.shape[0]

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(ld - lse)
            p[np.arange(n), targets] -= 1.0
            logits.accumulate_grad(p * (g / n), own=True)

    return _make(nll.mean(dtype=np.float32), (logits,), bwd)


def mse(pred: Tensor, target) -> Tensor:
    td = np.asarray(target, dtype=np.float32)
    if td.shape != pred.data.shape:
        raise ValueError("mse shape mismatch")
    diff = pred.data - td
    n = max(diff.size, 1)

    def bwd(g):
        if pred.requires_grad:
            pred.accumulate_grad(diff * (2.0 * g / n), own=True)

    return _make(np.float32((diff * diff).sum(dtype=np.float64) / n), (pred,), bwd)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    y = np.asarray(labels, dtype=np.float32)
    z = logits.data
    if y.shape != z.shape:
        raise ValueError("bce shape mismatch")
    # stable: max(z,0) - z*y + log(1+exp(-|z|))
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = max(z.size, 1)

    def bwd(g):
        if logits.requires_grad:
            s = 1.0 / (1.0 + np.exp(-z))
            logits.accumulate_grad((s - y) * (g / n), own=True)

    return _make(np.float32(loss.sum(dtype=np.float64) / n), (logits,), bwd)


# ---------------------------------------------------------------------------
# backward driver


def backward(loss: Tensor):
    """Fill .grad for every requires_grad tensor reachable from `loss`."""
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss is not on a tape")
    loss.accumulate_grad(np.ones_like(loss.data))
    for out, _inputs, bwd_fn in reversed(tape.records):
        if out.grad is not None:
            bwd_fn(out.grad)
