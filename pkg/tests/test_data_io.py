import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepgcn.data import (PRIMITIVES, DataConfig, FixedGraphDataset, FixedGraphSample, PointCloudSample,
                          block_sample, fixed_edges_to_table, gen_synthetic_graphs, gen_synthetic_parts,
                          load_datasets, load_nodelink_json, load_pointcloud_csv, save_nodelink_json,
                          save_pointcloud_csv)
from deepgcn.errors import ConfigError, ParseError, SamplingError, SchemaError
from deepgcn.model import ModelConfig, build_model, forward


def test_generator_is_deterministic():
    a = gen_synthetic_parts(128, 3, seed=5)
    b = gen_synthetic_parts(128, 3, seed=5)
    for x, y in zip(a, b):
        assert x.coords.tobytes() == y.coords.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()
    assert a[0].coords.tobytes() != gen_synthetic_parts(128, 1, seed=6)[0].coords.tobytes()


def test_sample_depends_only_on_seed_and_index():
    a = gen_synthetic_parts(96, 4, seed=2)
    b = gen_synthetic_parts(96, 2, seed=2)
    assert np.array_equal(a[1].coords, b[1].coords)


def test_all_parts_present_in_nearly_every_sample():
    covered = sum(len(np.unique(gen_synthetic_parts(64, 1, seed=s)[0].labels)) == len(PRIMITIVES)
                  for s in range(1000))
    assert covered >= 990


def test_single_primitive_has_one_label():
    s = gen_synthetic_parts(100, 1, seed=1, n_primitives=(1, 1))[0]
    assert len(np.unique(s.labels)) == 1 and s.n == 100


def test_class_balance_within_factor_three():
    labels = np.concatenate([s.labels for s in gen_synthetic_parts(256, 40, seed=0)])
    counts = np.bincount(labels, minlength=3)
    assert counts.max() <= 3 * counts.min()


def test_generator_argument_errors():
    with pytest.raises(ValueError):
        gen_synthetic_parts(63, 1)
    with pytest.raises(ValueError):
        gen_synthetic_parts(64, 1, parts=("cone",))


def test_csv_round_trip(tmp_path):
    s = PointCloudSample(np.array([[0.1, 0.2, 0.3], [1, 2, 3], [-1e-9, 5, 7.25]]), np.array([0, 2, 1]))
    save_pointcloud_csv(s, tmp_path / "a.csv")
    t = load_pointcloud_csv(tmp_path / "a.csv")
    assert np.array_equal(t.coords, s.coords) and np.array_equal(t.labels, s.labels)
    assert t.extra is None


def test_csv_with_extra_channels(tmp_path):
    s = gen_synthetic_parts(4096, 1, seed=3)[0]
    s = PointCloudSample(s.coords, s.labels, np.random.default_rng(0).random((4096, 2)), ("r", "g"))
    save_pointcloud_csv(s, tmp_path / "b.csv")
    t = load_pointcloud_csv(tmp_path / "b.csv")
    assert t.features.shape == (4096, 5) and t.extra_names == ("r", "g")
    assert np.allclose(t.features, s.features, rtol=1e-8)


def test_csv_nan_row_names_line(tmp_path):
    (tmp_path / "c.csv").write_text("x,y,z,label\n0,0,0,1\n1,nan,0,0\n")
    with pytest.raises(ParseError) as err:
        load_pointcloud_csv(tmp_path / "c.csv")
    assert err.value.line == 3 and "line 3" in str(err.value)


@pytest.mark.parametrize("text,exc", [
    ("x,y,z\n0,0,0\n", SchemaError),
    ("a,b,c,label\n0,0,0,1\n", SchemaError),
    ("x,y,z,label\n0,0,1\n", ParseError),
    ("x,y,z,label\n0,0,0,cat\n", ParseError),
    ("", SchemaError),
])
def test_csv_malformed(tmp_path, text, exc):
    (tmp_path / "d.csv").write_text(text)
    with pytest.raises(exc):
        load_pointcloud_csv(tmp_path / "d.csv")


def test_block_sample_small_cloud_is_resampled():
    s = gen_synthetic_parts(200, 1, seed=0)[0]
    small = PointCloudSample(s.coords * 0.1, s.labels)
    out = block_sample(small, 1.0, 4096, np.random.default_rng(0))
    assert out.n == 4096 and out.features.shape == (4096, 6)
    assert set(map(tuple, out.coords)) <= set(map(tuple, small.coords))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.3, 2.0), st.integers(64, 600))
def test_block_sample_output_contract(seed, size, n_out):
    cloud = gen_synthetic_parts(300, 1, seed=seed % 1000)[0]
    out = block_sample(cloud, size, n_out, np.random.default_rng(seed))
    assert out.n == n_out
    norm = out.extra[:, -3:]
    assert norm.min() >= 0 and norm.max() <= 1
    lo = cloud.coords.min(axis=0)
    zr = cloud.coords[:, 2].max() - lo[2]
    assert np.allclose(norm[:, 2], (out.coords[:, 2] - lo[2]) / zr)


def test_block_sample_without_replacement_when_long():
    cloud = PointCloudSample(np.random.default_rng(0).random((500, 3)) * 0.5, np.zeros(500, int))
    out = block_sample(cloud, 1.0, 300, np.random.default_rng(1))
    assert len(np.unique(out.coords, axis=0)) == 300


def test_block_sample_empty_block():
    # two far-apart clusters leave most candidate blocks empty
    pts = np.array([[0, 0, 0], [100, 100, 0]], dtype=float)
    with pytest.raises(SamplingError):
        block_sample(PointCloudSample(pts, [0, 1]), 0.01, 10, np.random.default_rng(0), retries=3)


def test_block_sample_feeds_model():
    cloud = gen_synthetic_parts(500, 1, seed=4)[0]
    out = block_sample(cloud, 0.8, 256, np.random.default_rng(0))
    from deepgcn.graph import GraphBatch

    cfg = ModelConfig(in_channels=6, width=8, k=8, num_classes=3, fusion_width=8, head_widths=(8, 8))
    logits = forward(build_model(cfg, 0), GraphBatch(out.features, np.array([0, 256])))
    assert logits.shape == (256, 3)


def write_graph(tmp_path, doc, feats, labels):
    (tmp_path / "graph.json").write_text(json.dumps(doc))
    np.savetxt(tmp_path / "feats.csv", feats, delimiter=",")
    np.savetxt(tmp_path / "labels.csv", labels, delimiter=",", fmt="%d")
    return tmp_path / "graph.json"


def test_nodelink_triangle_has_six_edges(tmp_path):
    doc = {"nodes": [{"id": i} for i in range(3)],
           "links": [{"source": 0, "target": 1}, {"source": 1, "target": 2}, {"source": 2, "target": 0}]}
    (g,) = load_nodelink_json(write_graph(tmp_path, doc, np.eye(3), np.ones((3, 1))))
    assert len(g.edges) == 6 and g.split == "train" and g.isolated.size == 0


def test_nodelink_known_shapes(tmp_path):
    doc = {"nodes": [{"id": f"n{i}", "split": "val"} for i in range(5)],
           "links": [{"source": "n0", "target": "n1"}]}
    rng = np.random.default_rng(0)
    (g,) = load_nodelink_json(write_graph(tmp_path, doc, rng.random((5, 4)), rng.integers(0, 2, (5, 2))))
    assert g.features.shape == (5, 4) and g.labels.shape == (5, 2) and g.split == "val"
    assert list(g.isolated) == [2, 3, 4]


def test_nodelink_empty_links_flag_isolated(tmp_path):
    doc = {"nodes": [{"id": i} for i in range(3)], "links": []}
    (g,) = load_nodelink_json(write_graph(tmp_path, doc, np.eye(3), np.zeros((3, 2))))
    assert list(g.isolated) == [0, 1, 2]
    _, iso = fixed_edges_to_table(g, 2, np.random.default_rng(0))
    assert list(iso) == [0, 1, 2]


@pytest.mark.parametrize("mutate", ["dangling", "rows", "labels"])
def test_nodelink_schema_errors(tmp_path, mutate):
    doc = {"nodes": [{"id": i} for i in range(3)], "links": [{"source": 0, "target": 1}]}
    feats, labels = np.eye(3), np.zeros((3, 1))
    if mutate == "dangling":
        doc["links"].append({"source": 0, "target": 9})
    elif mutate == "rows":
        feats = np.eye(4)
    else:
        labels = np.full((3, 1), 2)
    with pytest.raises(SchemaError):
        load_nodelink_json(write_graph(tmp_path, doc, feats, labels))


def test_nodelink_round_trip(tmp_path):
    graphs = gen_synthetic_graphs(3, n_nodes=20, seed=1, splits=("train", "val", "test"))
    save_nodelink_json(graphs, tmp_path, directed=True)
    back = load_nodelink_json(tmp_path / "graph.json")
    assert [g.split for g in back] == ["train", "val", "test"]
    for a, b in zip(graphs, back):
        assert np.allclose(a.features, b.features, rtol=1e-8)
        assert np.array_equal(a.labels, b.labels)
        assert set(map(tuple, a.edges)) == set(map(tuple, b.edges))


def star(n_leaves):
    edges = [(0, i) for i in range(1, n_leaves + 1)]
    return FixedGraphSample(np.zeros((n_leaves + 1, 2)), edges, np.zeros((n_leaves + 1, 1)))


def test_fixed_table_degree_exactly_k():
    t, _ = fixed_edges_to_table(star(4), 4, np.random.default_rng(0))
    assert sorted(t.indices[0]) == [1, 2, 3, 4]


@settings(max_examples=25)
@given(st.integers(0, 2**31), st.integers(1, 5))
def test_fixed_table_rows_are_true_neighbours(seed, k):
    t, iso = fixed_edges_to_table(star(2 * k), k, np.random.default_rng(seed))
    assert len(set(t.indices[0])) == k and set(t.indices[0]) <= set(range(1, 2 * k + 1))
    assert list(iso) == list(range(1, 2 * k + 1))


def test_fixed_table_padding_and_isolated():
    g = FixedGraphSample(np.zeros((4, 1)), [(0, 1), (0, 2)], np.zeros((4, 1)))
    t, iso = fixed_edges_to_table(g, 5, np.random.default_rng(1))
    row = list(t.indices[0])
    assert set(row) == {1, 2} and row.count(1) >= 2 and row.count(2) >= 2
    assert list(iso) == [1, 2, 3]
    assert list(t.indices[1]) == [0] * 5 and list(t.indices[3]) == [2] * 5


def test_fixed_graph_sample_rejects_bad_input():
    with pytest.raises(SchemaError):
        FixedGraphSample(np.zeros((2, 1)), [(0, 2)], np.zeros((2, 1)))
    with pytest.raises(SchemaError):
        FixedGraphSample(np.array([[np.inf], [0]]), [(0, 1)], np.zeros((2, 1)))


def test_synthetic_graph_dataset():
    ds = FixedGraphDataset(gen_synthetic_graphs(4, n_nodes=30, seed=0), k=4)
    assert ds.multilabel and ds.num_classes == 4 and ds.in_channels == 8
    batch = next(ds.batches(2))
    assert batch.neighbors.indices.shape == (60, 4) and batch.labels.shape == (60, 4)


def test_data_config_and_loading(tmp_path):
    train, held = load_datasets(DataConfig(n_points=64, n_shapes=3, eval_shapes=1))
    assert len(train) == 3 and len(held) == 1 and train.num_classes == 3
    for i, s in enumerate(gen_synthetic_parts(300, 2, seed=1)):
        save_pointcloud_csv(s, tmp_path / f"s{i}.csv")
    train, held = load_datasets(DataConfig(source="csv", path=str(tmp_path), block_points=128))
    assert train is held and train.in_channels == 6
    with pytest.raises(ConfigError):
        DataConfig(source="hdf5")
    with pytest.raises(ConfigError):
        DataConfig(source="csv")
    with pytest.raises(ConfigError):
        DataConfig(n_shapes=1, eval_shapes=-1)
