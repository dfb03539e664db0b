import numpy as np
import pytest

from deepgcn import ops
from deepgcn.autodiff import Tape
from deepgcn.errors import CheckpointError, ConfigError, DimensionError
from deepgcn.graph import GraphBatch
from deepgcn.model import (ModelConfig, backbone_forward, build_model, dilation_schedule, forward,
                           fused_width, load_checkpoint, param_count, predict, save_checkpoint)

SMALL = dict(in_channels=6, width=8, k=4, num_classes=3, fusion_width=16, head_widths=(8, 8))


def cloud_batch(n=40, graphs=2, channels=6, seed=0, labels=3):
    rng = np.random.default_rng(seed)
    feats = [rng.normal(size=(n, channels)) for _ in range(graphs)]
    return GraphBatch.stack(feats, [rng.integers(0, labels, n) for _ in range(graphs)])


def test_dense_layer_widths():
    cfg = ModelConfig(in_channels=6, width=32, connection="dense", depth=5)
    assert cfg.layer_in_width(3) == 102
    assert [cfg.layer_in_width(l) for l in range(3)] == [6, 38, 70]
    model = build_model(ModelConfig(**{**SMALL, "connection": "dense", "depth": 3}), 0)
    h, fused = backbone_forward(model, cloud_batch())
    assert h.shape == (80, 6 + 3 * 8)
    assert [f.shape[1] for f in fused] == [8, 8, 8]


def test_dilation_schedule():
    cfg = ModelConfig(k=16)
    assert [dilation_schedule(l, cfg) for l in (0, 1, 7, 15, 27)] == [1, 2, 8, 16, 16]
    assert dilation_schedule(5, ModelConfig(dilation=False)) == 1
    assert dilation_schedule(10, ModelConfig(k=16), n=100) == 6
    assert dilation_schedule(3, ModelConfig(k=4, dilation_cap=2)) == 2
    with pytest.raises(ValueError):
        dilation_schedule(-1, cfg)


def test_residual_with_zero_branches_is_identity():
    cfg = ModelConfig(**{**SMALL, "in_channels": 8, "stem": False, "depth": 6, "dynamic_knn": False})
    model = build_model(cfg, 1)
    for name, t in model.store.items():
        if name.startswith("backbone") and (name.endswith("weight") or name.endswith("bias")):
            t.data = np.zeros_like(t.data)
    batch = cloud_batch(channels=8)
    h, _ = backbone_forward(model, batch)
    assert np.allclose(h.data, batch.features)


def test_residual_with_stem_needs_no_width_match():
    ModelConfig(**{**SMALL, "connection": "res"})
    with pytest.raises(ConfigError):
        ModelConfig(**{**SMALL, "connection": "res", "stem": False})


def test_parameter_counts():
    counts = {c: param_count(build_model(ModelConfig(**SMALL, depth=4, connection=c), 0))
              for c in ("plain", "res", "dense")}
    assert counts["res"] == counts["plain"]
    assert counts["dense"] > counts["plain"]


def test_fused_width():
    assert fused_width(ModelConfig(depth=7, width=32)) == 224
    assert fused_width(ModelConfig(depth=7, width=32, in_channels=9, fuse_input=True)) == 233


@pytest.mark.parametrize("connection", ["plain", "res", "dense"])
@pytest.mark.parametrize("operator", ["edgeconv", "mrgcn", "sage", "sage_n", "gin", "mean"])
def test_forward_shapes_and_finite(connection, operator):
    model = build_model(ModelConfig(**SMALL, depth=3, connection=connection, operator=operator), 0)
    batch = cloud_batch()
    logits = forward(model, batch, train=True, rng=np.random.default_rng(0))
    assert logits.shape == (80, 3)
    assert np.all(np.isfinite(logits.data))


def test_eval_forward_is_deterministic():
    model = build_model(ModelConfig(**SMALL, depth=4), 3)
    batch = cloud_batch()
    a = forward(model, batch).data
    b = forward(model, batch).data
    assert np.array_equal(a, b)
    assert predict(model, batch).shape == (80,)


def test_train_forward_needs_rng_when_stochastic():
    model = build_model(ModelConfig(**SMALL, depth=2), 0)
    with pytest.raises(ValueError):
        forward(model, cloud_batch(), train=True)


def test_graphs_in_a_batch_do_not_interact():
    model = build_model(ModelConfig(**SMALL, depth=3), 4)
    batch = cloud_batch(graphs=2)
    alone = GraphBatch(batch.features[:40], np.array([0, 40]))
    assert np.allclose(forward(model, batch).data[:40], forward(model, alone).data, atol=1e-5)


def test_input_width_mismatch():
    model = build_model(ModelConfig(**SMALL), 0)
    with pytest.raises(DimensionError):
        forward(model, cloud_batch(channels=5))


@pytest.mark.parametrize("connection", ["res", "dense"])
def test_gradient_reaches_every_layer_at_depth_56(connection):
    cfg = ModelConfig(**{**SMALL, "depth": 56, "connection": connection, "dynamic_knn": False})
    model = build_model(cfg, 0)
    batch = cloud_batch(n=30, graphs=1)
    with Tape() as tape:
        logits = forward(model, batch, train=True, rng=np.random.default_rng(1))
        loss = ops.softmax_xent(logits, batch.labels)
        tape.backward(loss)
    for l in range(56):
        g = model.layers[l].mlp.stages[0].weight.grad
        assert g is not None and np.all(np.isfinite(g)) and np.abs(g).sum() > 0, l


def test_fixed_edges_model_uses_batch_table():
    from deepgcn.graph import NeighborTable

    cfg = ModelConfig(**{**SMALL, "fixed_edges": True, "dynamic_knn": False, "depth": 2})
    model = build_model(cfg, 0)
    idx = np.array([[1, 2], [0, 2], [0, 1], [1, 2]])
    batch = GraphBatch(np.ones((4, 6)), np.array([0, 4]), NeighborTable(idx))
    assert forward(model, batch).shape == (4, 3)
    with pytest.raises(DimensionError):
        forward(model, GraphBatch(np.ones((4, 6)), np.array([0, 4])))


def test_checkpoint_round_trip(tmp_path):
    model = build_model(ModelConfig(**SMALL, depth=3, operator="gin"), 5)
    for _, t in model.store.items(trainable_only=True):
        t.data = t.data + np.random.default_rng(0).normal(size=t.shape).astype(t.dtype)
    path = tmp_path / "m.dgcn"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.cfg == model.cfg
    assert np.array_equal(loaded.store.to_vector(np.float32), model.store.to_vector(np.float32))
    batch = cloud_batch()
    assert np.allclose(forward(loaded, batch).data, forward(model, batch).data, atol=1e-6)


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.dgcn"
    save_checkpoint(build_model(ModelConfig(**SMALL, depth=2), 0), path)
    blob = path.read_bytes()
    (tmp_path / "magic.dgcn").write_bytes(b"XXXX" + blob[4:])
    (tmp_path / "short.dgcn").write_bytes(blob[:-8])
    for name in ("magic.dgcn", "short.dgcn"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


@pytest.mark.parametrize("kw", [
    dict(connection="skip"), dict(operator="gat"), dict(depth=0), dict(epsilon=1.5),
    dict(dropout=1.0), dict(head_widths=(4,)), dict(fixed_edges=True, dynamic_knn=True),
    dict(knn_channels=10),
])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)
