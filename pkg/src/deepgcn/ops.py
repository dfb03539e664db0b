"""Differentiable primitives.

Every function takes and returns :class:`~deepgcn.autodiff.Tensor` objects
(index arrays and constants are plain numpy) and records a backward rule on
the active tape.  Backward closures capture only what they need; the
``saved`` count passed to the tape is the number of activation scalars held
for backward, not counting parameters which are resident anyway.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autodiff import Tensor, record
from .errors import DimensionError, NumericError

__all__ = [
    "add", "sub", "mul", "scale", "matmul", "bias_add", "relu", "sigmoid",
    "concat_last", "slice_last", "sum_axis", "mean_axis", "max_axis", "expand", "reshape",
    "gather_rows", "segment_max", "batch_norm", "BatchNormState", "dropout",
    "l2_normalize_rows", "softmax_xent", "bce_logits", "as_tensor",
]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from exc


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    sa, sb = a.shape, b.shape
    ad = a.data if b.requires_grad else None
    bd = b.data if a.requires_grad else None
    saved = (a.size if ad is not None else 0) + (b.size if bd is not None else 0)

    def backward(g):
        ga = _unbroadcast(g * bd, sa) if bd is not None else None
        gb = _unbroadcast(g * ad, sb) if ad is not None else None
        return ga, gb

    return record("mul", a.data * b.data, (a, b), backward, saved)


def scale(x: Tensor, c: float) -> Tensor:
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """``a @ w`` for ``a`` of shape (..., D) and ``w`` of shape (D, E)."""
    if w.ndim != 2 or a.ndim < 1 or a.shape[-1] != w.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {w.shape}")
    d, e = w.shape
    ad = a.data if w.requires_grad else None
    wd = w.data if a.requires_grad else None

    def backward(g):
        ga = g @ wd.T if wd is not None else None
        gw = ad.reshape(-1, d).T @ g.reshape(-1, e) if ad is not None else None
        return ga, gw

    saved = a.size if ad is not None else 0
    return record("matmul", a.data @ w.data, (a, w), backward, saved)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add: {x.shape} + {b.shape}")
    e = b.shape[0]
    return record("bias_add", x.data + b.data, (x, b),
                  lambda g: (g, g.reshape(-1, e).sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                  lambda g: (g * mask,), mask.size)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return record("sigmoid", y, (x,), lambda g: (g * y * (1 - y),), y.size)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def concat_last(xs) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat_last: empty list")
    lead = xs[0].shape[:-1]
    for x in xs:
        if x.shape[:-1] != lead:
            raise DimensionError(f"concat_last: leading shapes differ {lead} vs {x.shape[:-1]}")
    if len(xs) == 1:
        return xs[0]
    cuts = np.cumsum([x.shape[-1] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=-1)
    return record("concat_last", out, xs, lambda g: tuple(np.split(g, cuts, axis=-1)))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    width = x.shape[-1]
    if not 0 <= start < stop <= width:
        raise DimensionError(f"slice_last: [{start}:{stop}] out of range for width {width}")

    def backward(g):
        full = np.zeros(x_shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    x_shape = x.shape
    return record("slice_last", x.data[..., start:stop].copy(), (x,), backward)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    shape = x.shape
    return record("sum_axis", x.data.sum(axis=axis), (x,),
                  lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    shape = x.shape
    n = shape[axis]
    if n == 0:
        raise DimensionError("mean_axis: empty axis")
    return record("mean_axis", x.data.mean(axis=axis), (x,),
                  lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),))


def _index_dtype(n):
    return np.uint8 if n < 256 else (np.int32 if n < 2**31 else np.int64)


def max_axis(x: Tensor, axis: int = 1) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first (lowest-index) maximiser."""
    n = x.shape[axis]
    if n == 0:
        raise DimensionError("max_axis: empty axis")
    shape = x.shape
    if x.ndim == 3 and axis == 1 and n < 256:
        out, arg = _kernels.max_argmax_axis1(np.ascontiguousarray(x.data))

        def backward(g):
            return (_kernels.max_backward_axis1(np.ascontiguousarray(g), arg, n),)

        return record("max_axis", out, (x,), backward, arg.size)

    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)
    arg = arg.astype(_index_dtype(n))

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, arg.astype(np.intp), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return record("max_axis", out, (x,), backward, arg.size)


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast ``x`` to ``shape`` (numpy rules); backward sums the copies."""
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"expand: {old} -> {shape}") from exc
    return record("expand", out, (x,), lambda g: (_unbroadcast(g, old),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {shape}") from exc
    return record("reshape", out, (x,), lambda g: (g.reshape(old),))


def gather_rows(x: Tensor, idx) -> Tensor:
    """``x[idx]`` for a 2-D ``x``; backward scatter-adds into the source rows."""
    if x.ndim != 2:
        raise DimensionError(f"gather_rows: expected 2-D source, got {x.shape}")
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather_rows: indices must be integers")
    n, d = x.shape
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    out = x.data[idx]

    table = idx.reshape(idx.shape[0] if idx.ndim else 1, -1)

    def backward(g):
        g3 = np.ascontiguousarray(g).reshape(table.shape[0], table.shape[1], d)
        return (_kernels.scatter_add_rows(table, g3, n),)

    return record("gather_rows", out, (x,), backward, idx.size)


def segment_max(x: Tensor, offsets) -> Tensor:
    """Per-segment maximum over rows; segment ``i`` is ``x[offsets[i]:offsets[i+1]]``."""
    if x.ndim != 2:
        raise DimensionError("segment_max: expected 2-D input")
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets[0] != 0 or offsets[-1] != x.shape[0] or np.any(np.diff(offsets) <= 0):
        raise DimensionError("segment_max: offsets must partition the rows into non-empty segments")
    starts = offsets[:-1]
    out = np.maximum.reduceat(x.data, starts, axis=0)
    arg = np.stack([s + np.argmax(x.data[s:e], axis=0) for s, e in zip(offsets[:-1], offsets[1:])])
    shape = x.shape
    cols = np.arange(shape[1])

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (arg, cols[None, :]), g)
        return (full,)

    return record("segment_max", out, (x,), backward, arg.size)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm site (tensors live in a ParamStore)."""

    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.9
    eps: float = 1e-5


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Normalise the last axis over all leading axes.

    In training mode batch statistics are used and the running statistics
    are updated in place; in eval mode the running statistics are used.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: {x.shape} with gamma {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    m = int(np.prod(x.shape[:-1]))
    eps = state.eps
    if train:
        if m < 2:
            raise NumericError("batch_norm: need at least 2 rows in train mode")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = state.momentum
        rm, rv = state.running_mean, state.running_var
        rm.data = (mom * rm.data + (1 - mom) * mu).astype(rm.dtype)
        rv.data = (mom * rv.data + (1 - mom) * var * (m / (m - 1))).astype(rv.dtype)
    else:
        mu = state.running_mean.data.astype(x.dtype)
        var = state.running_var.data.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    if train:
        def backward(g):
            gxhat = g * gd
            s1 = gxhat.sum(axis=axes)
            s2 = (gxhat * xhat).sum(axis=axes)
            gx = (inv / m) * (m * gxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        def backward(g):
            return g * (gd * inv), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record("batch_norm", out, (x, gamma, beta), backward, xhat.size)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    factor = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mult = keep * factor
    return record("dropout", x.data * mult, (x,), lambda g: (g * mult,), keep.size)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Divide each row by its L2 norm; all-zero rows are left at zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    nz = norm > 0
    safe = np.where(nz, norm, 1).astype(x.dtype)
    y = np.where(nz, x.data / safe, 0).astype(x.dtype)

    def backward(g):
        gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(nz, gx, 0),)

    return record("l2_normalize_rows", y, (x,), backward, y.size + norm.size)


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over rows."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_xent: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError("softmax_xent: label out of range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    se = ez.sum(axis=1, keepdims=True)
    lse = (np.log(se) + zmax)[:, 0]
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=z.dtype)
    probs = ez / se

    def backward(g):
        grad = probs.copy()
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return record("softmax_xent", loss, (logits,), backward, probs.size)


def bce_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy with logits over all entries."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"bce_logits: logits {logits.shape}, targets {t.shape}")
    z = logits.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray(per.mean(), dtype=z.dtype)
    count = z.size
    probs = _sigmoid(z)

    def backward(g):
        return ((probs - t) * (g / count),)

    return record("bce_logits", loss, (logits,), backward, probs.size)
