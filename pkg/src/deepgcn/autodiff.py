"""Tensor, tape and parameter store for reverse-mode differentiation.

Ops live in :mod:`deepgcn.ops`; this module only knows how to record them
and how to replay the record backwards.  A node on the tape keeps a closure
over the arrays its backward rule needs and nothing else, so the amount of
saved state (``Tape.saved_scalars``) is a faithful measure of activation
memory.
"""

from __future__ import annotations

import itertools
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError

_uid = itertools.count()
_tape_stack: list["Tape"] = []


class Tensor:
    """A dense array that may take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "uid", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc" and dtype is None:
            arr = arr.astype(np.float64)
        if arr.ndim > 3:
            raise DimensionError(f"tensors have at most 3 axes, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.uid = next(_uid)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


@dataclass
class _Node:
    op: str
    out_uid: int
    # (uid, leaf tensor or None, requires_grad) per input; non-leaf inputs are
    # referenced by uid only so their data can be freed after the forward pass.
    inputs: list
    backward: Callable | None
    saved: int


class Tape:
    """Ordered record of differentiable op applications.

    Use as a context manager; every op executed inside the block whose inputs
    require gradients is appended.  Nodes are replayed in reverse recording
    order, which is a valid reverse topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.saved_scalars = 0
        self.peak_saved_scalars = 0
        self._closed = False

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, out, inputs, backward, saved):
        refs = [(t.uid, t if t.is_leaf else None, t.requires_grad) for t in inputs]
        self.nodes.append(_Node(op, out.uid, refs, backward, int(saved)))
        self.saved_scalars += int(saved)
        self.peak_saved_scalars = max(self.peak_saved_scalars, self.saved_scalars)

    def backward(self, loss: Tensor, grad=None, retain_graph=False):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self._closed:
            raise RuntimeError("tape already consumed; pass retain_graph=True to backward twice")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        if seed.shape != loss.shape:
            raise DimensionError(f"seed gradient shape {seed.shape} != loss shape {loss.shape}")
        pending = {loss.uid: seed}
        if loss.is_leaf:
            _accumulate_leaf(loss, seed)
            return
        for node in reversed(self.nodes):
            g = pending.pop(node.out_uid, None)
            if g is not None:
                in_grads = node.backward(g)
                for (uid, leaf, req), gi in zip(node.inputs, in_grads):
                    if not req or gi is None:
                        continue
                    if leaf is not None:
                        _accumulate_leaf(leaf, gi)
                    elif uid in pending:
                        pending[uid] = pending[uid] + gi
                    else:
                        pending[uid] = gi
            if not retain_graph:
                self.saved_scalars -= node.saved
                node.backward = None
        if not retain_graph:
            self.nodes.clear()
            self._closed = True


def _accumulate_leaf(t: Tensor, g):
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


CHECK_FINITE = True


def check_finite(op, arr):
    # a float64 sum of finite entries cannot overflow, and NaN/Inf propagate into it
    if CHECK_FINITE and arr.dtype.kind == "f" and not math.isfinite(arr.sum(dtype=np.float64)):
        raise NumericError(f"non-finite values produced by {op}")


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def record(op: str, out_data, inputs: Sequence[Tensor], backward, saved=0) -> Tensor:
    """Wrap ``out_data`` in a Tensor and put it on the active tape if needed.

    ``backward`` maps the output gradient to a tuple of input gradients
    (``None`` entries are allowed for inputs that do not need one).
    """
    check_finite(op, out_data)
    out = Tensor(out_data)
    out.is_leaf = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, out, inputs, backward, saved)
    return out


@dataclass
class _Entry:
    tensor: Tensor
    trainable: bool


@dataclass
class ParamStore:
    """Named parameters and buffers in deterministic insertion order.

    Buffers (batch-norm running statistics) are stored alongside parameters so
    that checkpoints capture everything inference depends on, but they never
    receive gradients and are excluded from :meth:`count`.
    """

    _entries: "OrderedDict[str, _Entry]" = field(default_factory=OrderedDict)

    def add(self, name: str, data, trainable=True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=trainable, name=name)
        self._entries[name] = _Entry(t, trainable)
        return t

    def __getitem__(self, name) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self, trainable_only=False) -> list[str]:
        return [n for n, e in self._entries.items() if e.trainable or not trainable_only]

    def items(self, trainable_only=False) -> Iterator[tuple[str, Tensor]]:
        for n, e in self._entries.items():
            if e.trainable or not trainable_only:
                yield n, e.tensor

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.items(trainable_only=True)]

    def zero_grad(self):
        for _, t in self.items():
            t.grad = None

    def count(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def state_arrays(self) -> list[np.ndarray]:
        return [t.data for _, t in self.items()]

    def total_size(self) -> int:
        return int(sum(t.size for _, t in self.items()))

    def to_vector(self, dtype=np.float32) -> np.ndarray:
        if not self._entries:
            return np.zeros(0, dtype=dtype)
        return np.concatenate([t.data.ravel() for _, t in self.items()]).astype(dtype)

    def load_vector(self, vec):
        vec = np.asarray(vec)
        if vec.size != self.total_size():
            raise DimensionError(f"expected {self.total_size()} values, got {vec.size}")
        pos = 0
        for _, t in self.items():
            n = t.size
            t.data = vec[pos:pos + n].reshape(t.shape).astype(t.dtype)
            pos += n

    def snapshot(self) -> list[np.ndarray]:
        return [t.data.copy() for _, t in self.items()]

    def restore(self, arrays):
        for (_, t), a in zip(self.items(), arrays):
            t.data = a.copy()

    def astype(self, dtype):
        for _, t in self.items():
            t.data = t.data.astype(dtype)
