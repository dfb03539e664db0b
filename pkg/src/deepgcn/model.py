"""Backbone (plain / residual / dense), fusion block and prediction head."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import config as cfgtext
from . import ops
from .autodiff import ParamStore, Tensor
from .errors import CheckpointError, ConfigError, DimensionError
from .graph import Graph, GraphBatch, NeighborTable, add_features, concat_features
from .knn import DilationPlan, dilated_knn
from .layers import LayerParams, MLPStage, OperatorKind, apply_layer, build_layer

CONNECTIONS = ("plain", "res", "dense")
CHECKPOINT_MAGIC = b"DGCN"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    in_channels: int = 9
    depth: int = 7
    width: int = 32
    k: int = 8
    operator: str = "mrgcn"
    connection: str = "res"
    epsilon: float = 0.2
    dynamic_knn: bool = True
    fixed_edges: bool = False
    num_classes: int = 13
    multilabel: bool = False
    dilation: bool = True
    dilation_cap: int = 16
    stem: bool = True
    knn_channels: int = 3
    fusion_width: int = 1024
    head_widths: tuple[int, ...] = (512, 256)
    dropout: float = 0.3
    fuse_input: bool = False
    mlp_depth: int = 1
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.operator = OperatorKind.parse(self.operator).value
        self.head_widths = tuple(int(w) for w in self.head_widths)
        if self.connection not in CONNECTIONS:
            raise ConfigError(f"connection must be one of {CONNECTIONS}, got {self.connection!r}")
        for name in ("in_channels", "depth", "width", "k", "num_classes", "dilation_cap",
                     "fusion_width", "mlp_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.head_widths) != 2 or min(self.head_widths) < 1:
            raise ConfigError("head_widths must list two positive widths")
        if not 0 <= self.epsilon <= 1:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.fixed_edges and self.dynamic_knn:
            raise ConfigError("fixed_edges and dynamic_knn are mutually exclusive")
        if not self.fixed_edges and not 1 <= self.knn_channels <= self.in_channels:
            raise ConfigError("knn_channels must lie in [1, in_channels]")
        if (self.connection == "res" and not self.stem and self.in_channels != self.width):
            raise ConfigError(
                f"residual layer 0 needs in_channels == width ({self.in_channels} != {self.width}); "
                "enable stem or match the widths")

    def layer_in_width(self, l: int) -> int:
        if self.connection == "dense":
            return self.in_channels + self.width * l
        return self.in_channels if l == 0 else self.width

    def layer_is_skip(self, l: int) -> bool:
        """Whether layer l carries the configured connection (the stem never does)."""
        if self.connection == "plain":
            return False
        if self.connection == "dense":
            return True
        return not (l == 0 and self.stem)


@dataclass
class DeepGCNModel:
    cfg: ModelConfig
    store: ParamStore
    layers: list[LayerParams]
    fusion: MLPStage
    head: list[MLPStage] = field(default_factory=list)

    @property
    def dtype(self):
        return self.fusion.weight.dtype


def build_model(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> DeepGCNModel:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    store = ParamStore()
    bn_kw = dict(momentum=cfg.bn_momentum, eps=cfg.bn_eps)
    layers = [build_layer(cfg.operator, cfg.layer_in_width(l), cfg.width, store, f"backbone.{l}", rng,
                          cfg.mlp_depth, **bn_kw)
              for l in range(cfg.depth)]
    fused = fused_width(cfg)
    fusion = MLPStage.create(store, "fusion", fused, cfg.fusion_width, rng, **bn_kw)
    h1, h2 = cfg.head_widths
    head = [
        MLPStage.create(store, "head.0", cfg.fusion_width + fused, h1, rng, **bn_kw),
        MLPStage.create(store, "head.1", h1, h2, rng, **bn_kw),
        MLPStage.create(store, "head.2", h2, cfg.num_classes, rng, batch_norm=False, activation=False),
    ]
    return DeepGCNModel(cfg, store, layers, fusion, head)


def fused_width(cfg: ModelConfig) -> int:
    return cfg.depth * cfg.width + (cfg.in_channels if cfg.fuse_input else 0)


def param_count(model: DeepGCNModel) -> int:
    return model.store.count()


def dilation_schedule(l: int, cfg: ModelConfig, n: int | None = None) -> int:
    """Linear ramp d = l + 1 (l zero-based), capped; optionally clamped for an n-vertex graph."""
    if l < 0:
        raise ValueError("layer index must be >= 0")
    d = min(l + 1, cfg.dilation_cap) if cfg.dilation else 1
    if n is not None:
        d = max(1, min(d, (n - 1) // cfg.k))
    return d


def _layer_table(model, l, source, batch, train, rng, static):
    cfg = model.cfg
    if cfg.fixed_edges:
        if batch.neighbors is None:
            raise DimensionError("fixed-edge model needs a batch with neighbours")
        return batch.neighbors
    if not cfg.dynamic_knn:
        if static[0] is None:
            static[0] = batch.neighbors if batch.neighbors is not None else dilated_knn(
                source, DilationPlan(cfg.k), offsets=batch.offsets)
        return static[0]
    plan = DilationPlan(cfg.k, dilation_schedule(l, cfg), cfg.epsilon, deterministic=not train)
    return dilated_knn(source, plan, rng, batch.offsets)


def backbone_forward(model: DeepGCNModel, batch: GraphBatch, train=False, rng=None):
    """Run the backbone; returns (final vertex features, features handed to fusion)."""
    cfg = model.cfg
    if batch.features.shape[1] != cfg.in_channels:
        raise DimensionError(f"model expects {cfg.in_channels} input channels, got {batch.features.shape[1]}")
    stochastic = train and cfg.dynamic_knn and cfg.epsilon > 0
    if stochastic and rng is None:
        raise ValueError("training with stochastic dilation needs a random generator")
    layer_rngs = rng.spawn(cfg.depth) if rng is not None else [None] * cfg.depth
    h = Tensor(batch.features.astype(model.dtype, copy=False))
    knn_source = batch.features[:, :cfg.knn_channels]
    static = [None]
    fused = [h] if cfg.fuse_input else []
    for l, params in enumerate(model.layers):
        table = _layer_table(model, l, knn_source, batch, train, layer_rngs[l], static)
        out = apply_layer(Graph(h, table), params, train)
        if cfg.layer_is_skip(l):
            h = concat_features([h, out]) if cfg.connection == "dense" else add_features(out, h)
        else:
            h = out
        fused.append(out if cfg.connection == "dense" else h)
        knn_source = h.data
    return h, fused


def forward(model: DeepGCNModel, batch: GraphBatch, train=False, rng=None) -> Tensor:
    """Per-vertex logits of shape (V, num_classes)."""
    cfg = model.cfg
    if rng is not None:
        rng, drop_rng = rng.spawn(2)
    else:
        drop_rng = None
    _, fused = backbone_forward(model, batch, train, rng)
    local = concat_features(fused)
    glob = ops.segment_max(model.fusion(local, train), batch.offsets)
    per_vertex = ops.gather_rows(glob, batch.graph_ids())
    x = concat_features([per_vertex, local])
    x = model.head[0](x, train)
    x = ops.dropout(x, cfg.dropout, train, drop_rng)
    x = model.head[1](x, train)
    return model.head[2](x, train)


def predict(model: DeepGCNModel, batch: GraphBatch) -> np.ndarray:
    """Class ids (single-label) or 0/1 matrix at sigmoid threshold 0.5 (multi-label)."""
    logits = forward(model, batch, train=False).data
    if model.cfg.multilabel:
        return (logits > 0).astype(np.int8)
    return logits.argmax(axis=1)


def model_config_text(cfg: ModelConfig) -> str:
    return cfgtext.to_text({"model": cfg})


def save_checkpoint(model: DeepGCNModel, path) -> None:
    """Magic, u32 version, u32 length + config text, u32 count + float32 LE values."""
    text = model_config_text(model.cfg).encode("utf-8")
    values = model.store.to_vector(np.dtype("<f4"))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", values.size))
        fh.write(values.tobytes())


def load_checkpoint(path) -> DeepGCNModel:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, tlen = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        text = blob[12:12 + tlen].decode("utf-8")
        (count,) = struct.unpack_from("<I", blob, 12 + tlen)
        start = 16 + tlen
        values = np.frombuffer(blob[start:start + 4 * count], dtype="<f4")
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupted checkpoint") from exc
    if values.size != count or len(blob) != start + 4 * count:
        raise CheckpointError(f"{path}: parameter block has wrong length")
    sections = cfgtext.parse_text(text)
    cfg = cfgtext.from_mapping(ModelConfig, sections.get("model", {}), "model")
    model = build_model(cfg, 0)
    model.store.load_vector(values)
    return model


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
