"""Graph-convolution operators: EdgeConv, MRGCN, GraphSAGE(-N), GIN and a mean baseline.

Each "mlp" is a stack of affine -> batch-norm -> ReLU stages of width
``d_out`` (one stage by default).  Operators return the transformed vertex
features; residual/dense wiring is the model's job.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, DimensionError
from .graph import Graph, concat_features, gather_neighbors


class OperatorKind(str, enum.Enum):
    EDGECONV = "edgeconv"
    MRGCN = "mrgcn"
    SAGE = "sage"
    SAGE_N = "sage_n"
    GIN = "gin"
    MEAN = "mean"

    @classmethod
    def parse(cls, name) -> "OperatorKind":
        try:
            return cls(str(name).lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown operator {name!r}; choose one of {choices}") from None


def glorot(rng, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


@dataclass
class MLPStage:
    weight: Tensor
    bias: Tensor
    gamma: Tensor | None = None
    beta: Tensor | None = None
    bn: ops.BatchNormState | None = None
    activation: bool = True

    @classmethod
    def create(cls, store: ParamStore, prefix, d_in, d_out, rng, batch_norm=True, activation=True,
               momentum=0.9, eps=1e-5, dtype=np.float32):
        w = store.add(f"{prefix}.weight", glorot(rng, d_in, d_out, dtype))
        b = store.add(f"{prefix}.bias", np.zeros(d_out, dtype))
        if not batch_norm:
            return cls(w, b, activation=activation)
        gamma = store.add(f"{prefix}.bn.gamma", np.ones(d_out, dtype))
        beta = store.add(f"{prefix}.bn.beta", np.zeros(d_out, dtype))
        rm = store.add(f"{prefix}.bn.running_mean", np.zeros(d_out, dtype), trainable=False)
        rv = store.add(f"{prefix}.bn.running_var", np.ones(d_out, dtype), trainable=False)
        return cls(w, b, gamma, beta, ops.BatchNormState(rm, rv, momentum, eps), activation)

    @property
    def d_in(self):
        return self.weight.shape[0]

    @property
    def d_out(self):
        return self.weight.shape[1]

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = ops.bias_add(ops.matmul(x, self.weight), self.bias)
        if self.bn is not None:
            h = ops.batch_norm(h, self.gamma, self.beta, self.bn, train)
        return ops.relu(h) if self.activation else h


@dataclass
class MLP:
    stages: list[MLPStage]

    def __call__(self, x, train):
        for stage in self.stages:
            x = stage(x, train)
        return x


def build_mlp(store, prefix, d_in, d_out, rng, depth=1, **kw) -> MLP:
    stages = []
    for i in range(depth):
        stages.append(MLPStage.create(store, f"{prefix}.{i}", d_in if i == 0 else d_out, d_out, rng, **kw))
    return MLP(stages)


@dataclass
class LayerParams:
    kind: OperatorKind
    d_in: int
    d_out: int
    mlp: MLP
    neighbor_mlp: MLP | None = None  # GraphSAGE's per-neighbour transform
    eps: Tensor | None = None  # GIN's learnable centre weight


def build_layer(kind, d_in, d_out, store: ParamStore, prefix, rng, mlp_depth=1, **bn_kw) -> LayerParams:
    kind = OperatorKind.parse(kind) if not isinstance(kind, OperatorKind) else kind
    if d_in < 1 or d_out < 1:
        raise ConfigError(f"layer widths must be positive, got {d_in} -> {d_out}")
    if kind in (OperatorKind.EDGECONV, OperatorKind.MRGCN, OperatorKind.MEAN):
        return LayerParams(kind, d_in, d_out, build_mlp(store, f"{prefix}.mlp", 2 * d_in, d_out, rng, mlp_depth, **bn_kw))
    if kind in (OperatorKind.SAGE, OperatorKind.SAGE_N):
        nb = build_mlp(store, f"{prefix}.nbr_mlp", d_in, d_in, rng, mlp_depth, **bn_kw)
        up = build_mlp(store, f"{prefix}.mlp", 2 * d_in, d_out, rng, mlp_depth, **bn_kw)
        return LayerParams(kind, d_in, d_out, up, neighbor_mlp=nb)
    if kind is OperatorKind.GIN:
        eps = store.add(f"{prefix}.eps", np.zeros(1, np.float32))
        return LayerParams(kind, d_in, d_out, build_mlp(store, f"{prefix}.mlp", d_in, d_out, rng, mlp_depth, **bn_kw), eps=eps)
    raise ConfigError(f"unhandled operator {kind}")


def _check(graph: Graph, params: LayerParams):
    if graph.features.shape[1] != params.d_in:
        raise DimensionError(
            f"{params.kind.value} layer expects width {params.d_in}, got {graph.features.shape[1]}")


def _centre(h: Tensor) -> Tensor:
    return ops.reshape(h, (h.shape[0], 1, h.shape[1]))


def edgeconv_forward(graph: Graph, params: LayerParams, train=False) -> Tensor:
    """max_u mlp([h_v, h_u - h_v]); the mlp runs once per edge."""
    _check(graph, params)
    h = graph.features
    n, k, d = graph.n, graph.neighbors.k, params.d_in
    hu = gather_neighbors(h, graph.neighbors)
    hv = ops.expand(_centre(h), (n, k, d))
    edge = ops.concat_last([hv, ops.sub(hu, _centre(h))])
    return ops.max_axis(params.mlp(edge, train), axis=1)


def mrgcn_forward(graph: Graph, params: LayerParams, train=False) -> Tensor:
    """mlp([h_v, max_u (h_u - h_v)]); the mlp runs once per vertex."""
    _check(graph, params)
    h = graph.features
    # h_v is constant over the neighbourhood: max_u(h_u - h_v) == max_u(h_u) - h_v
    rel = ops.sub(ops.max_axis(gather_neighbors(h, graph.neighbors), axis=1), h)
    return params.mlp(concat_features([h, rel]), train)


def graphsage_forward(graph: Graph, params: LayerParams, train=False, normalize=None) -> Tensor:
    """mlp2([h_v, max_u mlp1(h_u)]), optionally L2-normalised per vertex."""
    _check(graph, params)
    if normalize is None:
        normalize = params.kind is OperatorKind.SAGE_N
    h = graph.features
    # mlp1 is applied per vertex and then gathered, equal to applying it per neighbour
    z = params.neighbor_mlp(h, train)
    agg = ops.max_axis(gather_neighbors(z, graph.neighbors), axis=1)
    out = params.mlp(concat_features([h, agg]), train)
    return ops.l2_normalize_rows(out) if normalize else out


def gin_forward(graph: Graph, params: LayerParams, train=False) -> Tensor:
    """mlp((1 + eps) h_v + sum_u h_u) with a learnable scalar eps."""
    _check(graph, params)
    h = graph.features
    summed = ops.sum_axis(gather_neighbors(h, graph.neighbors), axis=1)
    centre = ops.add(h, ops.mul(h, params.eps))
    return params.mlp(ops.add(centre, summed), train)


def meangcn_forward(graph: Graph, params: LayerParams, train=False) -> Tensor:
    """mlp([h_v, mean_u h_u]); a mean-aggregator baseline."""
    _check(graph, params)
    h = graph.features
    agg = ops.mean_axis(gather_neighbors(h, graph.neighbors), axis=1)
    return params.mlp(concat_features([h, agg]), train)


_DISPATCH = {
    OperatorKind.EDGECONV: edgeconv_forward,
    OperatorKind.MRGCN: mrgcn_forward,
    OperatorKind.SAGE: graphsage_forward,
    OperatorKind.SAGE_N: graphsage_forward,
    OperatorKind.GIN: gin_forward,
    OperatorKind.MEAN: meangcn_forward,
}


def apply_layer(graph: Graph, params: LayerParams, train=False) -> Tensor:
    return _DISPATCH[params.kind](graph, params, train)
