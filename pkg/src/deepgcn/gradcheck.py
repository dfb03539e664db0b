"""Central finite-difference checks for every primitive and operator layer.

Each case builds a scalar function of some float64 tensors; the analytic
gradient from the tape is compared with central differences using the
norm-wise relative error ``|ga - gn| / max(|ga|, |gn|)``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .autodiff import ParamStore, Tape, Tensor, active_tape
from .graph import Graph, add_features, concat_features
from .knn import knn_bruteforce
from .layers import OperatorKind, apply_layer, build_layer

PRIMITIVE_TOL = 1e-4
LAYER_TOL = 1e-3
STEP = 1e-6


@dataclass
class Case:
    name: str
    kind: str  # "primitive" or "layer"
    build: Callable  # rng -> (fn(list[Tensor]) -> Tensor, list[Tensor])

    @property
    def tol(self):
        return PRIMITIVE_TOL if self.kind == "primitive" else LAYER_TOL


@dataclass
class CheckResult:
    name: str
    kind: str
    instances: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def relative_error(fn, inputs, rng, step=STEP) -> float:
    for t in inputs:
        t.grad = None
    # a fixed random projection makes every output entry matter
    proj = rng.normal(size=fn(inputs).shape)

    def value():
        return float(np.sum(fn(inputs).data * proj))

    with Tape() as tape:
        tape.backward(fn(inputs), grad=proj)
    analytic = np.concatenate([
        (t.grad if t.grad is not None else np.zeros(t.shape)).ravel() for t in inputs])
    numeric = []
    for t in inputs:
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value()
            flat[i] = orig - step
            down = value()
            flat[i] = orig
            numeric.append((up - down) / (2 * step))
    numeric = np.asarray(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def _op(name):
    # late lookup so inject_wrong_backward also reaches the primitive cases
    return lambda *a, **kw: getattr(ops, name)(*a, **kw)


def _t(rng, *shape):
    x = rng.normal(size=shape)
    return Tensor(x, requires_grad=True)


def _unary(op, *shape):
    return lambda rng: (lambda xs: op(xs[0]), [_t(rng, *shape)])


def _binary(op, sa, sb):
    return lambda rng: (lambda xs: op(xs[0], xs[1]), [_t(rng, *sa), _t(rng, *sb)])


def _batch_norm_case(train):
    def build(rng):
        state = ops.BatchNormState(Tensor(rng.normal(size=4)), Tensor(np.abs(rng.normal(size=4)) + 0.5))
        x, g, b = _t(rng, 3, 5, 4), _t(rng, 4), _t(rng, 4)

        def fn(xs):
            # keep running stats fixed between evaluations
            saved = state.running_mean.data.copy(), state.running_var.data.copy()
            out = _op("batch_norm")(xs[0], xs[1], xs[2], state, train)
            state.running_mean.data, state.running_var.data = saved
            return out
        return fn, [x, g, b]
    return build


def _dropout_case(rng):
    seed = int(rng.integers(1 << 31))
    return (lambda xs: _op("dropout")(xs[0], 0.4, True, np.random.default_rng(seed)), [_t(rng, 6, 5)])


def _gather_case(rng):
    idx = rng.integers(0, 7, size=(7, 3))
    return (lambda xs: _op("gather_rows")(xs[0], idx)), [_t(rng, 7, 4)]


def _segment_case(rng):
    offsets = np.array([0, 3, 4, 9])
    return (lambda xs: _op("segment_max")(xs[0], offsets)), [_t(rng, 9, 3)]


def _xent_case(rng):
    labels = rng.integers(0, 4, size=6)
    return (lambda xs: _op("softmax_xent")(xs[0], labels)), [_t(rng, 6, 4)]


def _bce_case(rng):
    targets = rng.integers(0, 2, size=(5, 3))
    return (lambda xs: _op("bce_logits")(xs[0], targets)), [_t(rng, 5, 3)]


def _concat_case(rng):
    return (lambda xs: concat_features(xs)), [_t(rng, 5, 2), _t(rng, 5, 3), _t(rng, 5, 1)]


PRIMITIVES = [
    Case("add", "primitive", _binary(_op("add"), (4, 3), (3,))),
    Case("sub", "primitive", _binary(_op("sub"), (2, 4, 3), (2, 1, 3))),
    Case("mul", "primitive", _binary(_op("mul"), (4, 3), (1, 3))),
    Case("scale", "primitive", _unary(lambda x: _op("scale")(x, -1.7), 4, 3)),
    Case("matmul", "primitive", _binary(_op("matmul"), (2, 4, 3), (3, 5))),
    Case("bias_add", "primitive", _binary(_op("bias_add"), (4, 3), (3,))),
    Case("relu", "primitive", _unary(_op("relu"), 5, 4)),
    Case("sigmoid", "primitive", _unary(_op("sigmoid"), 5, 4)),
    Case("concat_last", "primitive", _concat_case),
    Case("slice_last", "primitive", _unary(lambda x: _op("slice_last")(x, 1, 4), 3, 6)),
    Case("sum_axis", "primitive", _unary(lambda x: _op("sum_axis")(x, 1), 4, 3, 2)),
    Case("mean_axis", "primitive", _unary(lambda x: _op("mean_axis")(x, 1), 4, 3, 2)),
    Case("max_axis", "primitive", _unary(lambda x: _op("max_axis")(x, 1), 5, 4, 3)),
    Case("expand", "primitive", _unary(lambda x: _op("expand")(x, (4, 3, 2)), 4, 1, 2)),
    Case("reshape", "primitive", _unary(lambda x: _op("reshape")(x, (3, 8)), 4, 6)),
    Case("gather_rows", "primitive", _gather_case),
    Case("segment_max", "primitive", _segment_case),
    Case("batch_norm_train", "primitive", _batch_norm_case(True)),
    Case("batch_norm_eval", "primitive", _batch_norm_case(False)),
    Case("dropout", "primitive", _dropout_case),
    Case("l2_normalize_rows", "primitive", _unary(_op("l2_normalize_rows"), 5, 4)),
    Case("softmax_xent", "primitive", _xent_case),
    Case("bce_logits", "primitive", _bce_case),
    Case("add_features", "primitive", _binary(add_features, (5, 3), (5, 3))),
]


def _layer_case(kind: OperatorKind, n=10, k=3, d_in=3, d_out=4):
    def build(rng):
        store = ParamStore()
        params = build_layer(kind, d_in, d_out, store, "layer", rng, dtype=np.float64)
        store.astype(np.float64)
        x = _t(rng, n, d_in)
        table = knn_bruteforce(x.data, k)
        tensors = [x] + store.parameters()

        def fn(xs):
            return apply_layer(Graph(xs[0], table), params, train=True)
        return fn, tensors
    return build


LAYERS = [Case(kind.value, "layer", _layer_case(kind)) for kind in OperatorKind]


def registry() -> list[Case]:
    return PRIMITIVES + LAYERS


def run_case(case: Case, instances=20, seed=0) -> CheckResult:
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        fn, inputs = case.build(rng)
        worst = max(worst, relative_error(fn, inputs, rng))
    return CheckResult(case.name, case.kind, instances, worst, case.tol)


def run_all(instances=20, seed=0, names=None) -> list[CheckResult]:
    cases = [c for c in registry() if names is None or c.name in names]
    return [run_case(c, instances, seed) for c in cases]


@contextlib.contextmanager
def inject_wrong_backward(op_name: str, factor=1.5):
    """Temporarily scale the backward of ``ops.<op_name>`` to exercise failure reporting."""
    original = getattr(ops, op_name)

    def faulty(*args, **kw):
        out = original(*args, **kw)
        tape = active_tape()
        if tape is not None and tape.nodes and tape.nodes[-1].out_uid == out.uid:
            node = tape.nodes[-1]
            inner = node.backward
            node.backward = lambda g: tuple(None if x is None else factor * x for x in inner(g))
        return out

    setattr(ops, op_name, faulty)
    try:
        yield
    finally:
        setattr(ops, op_name, original)


def format_table(results) -> str:
    lines = [f"{'case':<20} {'kind':<10} {'n':>3} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<20} {r.kind:<10} {r.instances:>3} {r.max_rel_err:>12.3e} "
                     f"{r.tol:>8.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
