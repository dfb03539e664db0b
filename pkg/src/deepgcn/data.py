"""Datasets: synthetic part clouds, point-cloud CSV files and node-link graphs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError, ParseError, SamplingError, SchemaError
from .graph import GraphBatch, NeighborTable

PRIMITIVES = ("sphere", "cylinder", "box")


@dataclass
class PointCloudSample:
    """Coordinates (N, 3), optional extra channels (N, m) and int labels (N,)."""

    coords: np.ndarray
    labels: np.ndarray
    extra: np.ndarray | None = None
    extra_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise SchemaError(f"coords must be N x 3, got {self.coords.shape}")
        if self.labels.shape != (self.coords.shape[0],):
            raise SchemaError("one label per point required")
        if self.extra is not None:
            self.extra = np.asarray(self.extra, dtype=np.float64)
            if self.extra.ndim != 2 or self.extra.shape[0] != self.coords.shape[0]:
                raise SchemaError("extra channels must have one row per point")
            if not self.extra_names:
                self.extra_names = tuple(f"f{i + 1}" for i in range(self.extra.shape[1]))
            if len(self.extra_names) != self.extra.shape[1]:
                raise SchemaError("extra_names does not match the extra channel count")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def features(self) -> np.ndarray:
        if self.extra is None:
            return self.coords
        return np.hstack([self.coords, self.extra])


@dataclass
class FixedGraphSample:
    """A graph with given edges; ``edges[i] = (v, u)`` makes u a neighbour of v."""

    features: np.ndarray
    edges: np.ndarray
    labels: np.ndarray
    split: str = "train"
    isolated: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.labels = np.asarray(self.labels)
        n = self.features.shape[0]
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise SchemaError("edge endpoint out of range")
        if not np.isfinite(self.features).all():
            raise SchemaError("non-finite feature value")
        if len(self.labels) != n:
            raise SchemaError(f"{n} vertices but {len(self.labels)} label rows")
        deg = np.bincount(self.edges[:, 0][self.edges[:, 0] != self.edges[:, 1]], minlength=n)
        self.isolated = np.flatnonzero(deg == 0)

    @property
    def n(self) -> int:
        return self.features.shape[0]


# --------------------------------------------------------------------------
# synthetic part clouds


def _sample_surface(kind, n, size, rng):
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        return size * v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cylinder":
        r, h = size, 1.5 * size
        lateral, cap = 2 * math.pi * r * 2 * h, 2 * math.pi * r * r
        on_side = rng.random(n) < lateral / (lateral + 2 * cap)
        theta = rng.uniform(0, 2 * math.pi, n)
        rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
        z = np.where(on_side, rng.uniform(-h, h, n), np.where(rng.random(n) < 0.5, -h, h))
        return np.column_stack([rad * np.cos(theta), rad * np.sin(theta), z])
    if kind == "box":
        half = size * rng.uniform(0.6, 1.0, 3)
        areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1, 1, (n, 3)) * half
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * half[axis]
        return pts
    raise ValueError(f"unknown primitive {kind!r}")


def _place(sizes, rng, tries=2000):
    centres = []
    for s in sizes:
        for _ in range(tries):
            c = rng.uniform(-1, 1, 3)
            if all(np.linalg.norm(c - o) > s + so + 0.1 for o, so in zip(centres, sizes)):
                break
        centres.append(c)
    return centres


def gen_synthetic_parts(n_points, n_shapes, seed=0, parts=PRIMITIVES, n_primitives=(2, 4), noise=0.01):
    """Composite clouds of primitive surfaces, labelled by primitive type.

    Each sample holds between ``n_primitives[0]`` and ``n_primitives[1]``
    primitives, randomly rotated and placed without overlap, with Gaussian
    noise.  The label of a point is the index of its primitive's type in
    ``parts``.  Types are cycled from a random permutation, so a sample with
    at least ``len(parts)`` primitives contains every type and the lower
    bound of the count range is raised to ``len(parts)`` when possible.
    Sample ``i`` depends only on ``(seed, i)``.
    """
    if n_points < 64:
        raise ValueError(f"n_points must be >= 64, got {n_points}")
    lo, hi = n_primitives
    if not 1 <= lo <= hi:
        raise ValueError(f"bad primitive count range {n_primitives}")
    for p in parts:
        if p not in PRIMITIVES:
            raise ValueError(f"unknown primitive {p!r}; choose from {PRIMITIVES}")
    samples = []
    for i in range(n_shapes):
        rng = np.random.default_rng([seed, i])
        # include every part type whenever the count range allows it
        count = int(rng.integers(min(max(lo, len(parts)), hi), hi + 1))
        order = rng.permutation(len(parts))
        kinds = np.resize(order, count)
        sizes = rng.uniform(0.25, 0.4, count)
        centres = _place(sizes, rng)
        split = np.full(count, n_points // count)
        split[: n_points - split.sum()] += 1
        coords, labels = [], []
        for kind, size, centre, m in zip(kinds, sizes, centres, split):
            pts = _sample_surface(parts[kind], int(m), size, rng)
            pts = Rotation.random(random_state=rng).apply(pts) + centre
            coords.append(pts)
            labels.append(np.full(int(m), kind))
        coords = np.concatenate(coords) + rng.normal(0, noise, (n_points, 3))
        labels = np.concatenate(labels)
        perm = rng.permutation(n_points)
        samples.append(PointCloudSample(coords[perm], labels[perm]))
    return samples


# --------------------------------------------------------------------------
# point-cloud CSV


def save_pointcloud_csv(sample: PointCloudSample, path) -> None:
    header = ["x", "y", "z", *sample.extra_names, "label"]
    feats = sample.features
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row, lab in zip(feats, sample.labels):
            w.writerow([f"{v:.9g}" for v in row] + [int(lab)])


def load_pointcloud_csv(path) -> PointCloudSample:
    """Read ``x,y,z[,f1..fm],label``; bad rows raise ParseError with the line number."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header[:3] != ["x", "y", "z"]:
            raise SchemaError(f"{path}: header must start with x,y,z")
        if header[-1] != "label":
            raise SchemaError(f"{path}: missing label column")
        width = len(header)
        rows, labels = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"expected {width} fields, got {len(row)}", line)
            try:
                vals = [float(v) for v in row[:-1]]
                lab = int(row[-1])
            except ValueError:
                raise ParseError(f"non-numeric field in {row!r}", line) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", line)
            if lab < 0:
                raise ParseError("negative label", line)
            rows.append(vals)
            labels.append(lab)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    arr = np.asarray(rows)
    extra = arr[:, 3:] if width > 4 else None
    return PointCloudSample(arr[:, :3], np.asarray(labels), extra, tuple(header[3:-1]))


# --------------------------------------------------------------------------
# block sampling


def block_sample(cloud: PointCloudSample, block_size=1.0, n_out=4096, rng=None, retries=10):
    """Cut a vertical column of footprint ``block_size`` and resample it to ``n_out`` points.

    Three channels are appended: x, y relative to the column footprint and z
    relative to the cloud's height range, all in [0, 1].
    """
    rng = np.random.default_rng(rng)
    xyz = cloud.coords
    lo, hi = xyz.min(axis=0), xyz.max(axis=0)
    if np.all(hi[:2] - lo[:2] <= block_size):
        sel = np.arange(cloud.n)
        corner = lo[:2]
    else:
        for _ in range(retries):
            centre = rng.uniform(lo[:2], hi[:2])
            corner = centre - block_size / 2
            inside = np.all((xyz[:, :2] >= corner) & (xyz[:, :2] <= corner + block_size), axis=1)
            sel = np.flatnonzero(inside)
            if sel.size:
                break
        else:
            raise SamplingError(f"no points in a {block_size} block after {retries} tries")
    pick = rng.choice(sel, size=n_out, replace=sel.size < n_out)
    pts = xyz[pick]
    zr = hi[2] - lo[2]
    norm = np.column_stack([
        (pts[:, 0] - corner[0]) / block_size,
        (pts[:, 1] - corner[1]) / block_size,
        (pts[:, 2] - lo[2]) / zr if zr > 0 else np.zeros(n_out),
    ])
    norm = np.clip(norm, 0.0, 1.0)
    extra = norm if cloud.extra is None else np.hstack([cloud.extra[pick], norm])
    names = (*cloud.extra_names, "nx", "ny", "nz")
    return PointCloudSample(pts, cloud.labels[pick], extra, names)


# --------------------------------------------------------------------------
# node-link graphs


def _read_matrix(path, what):
    rows = []
    with open(path, newline="") as fh:
        for line, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError:
                if line == 1:
                    continue  # header
                raise ParseError(f"{path}: non-numeric {what} value", line) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(f"{path}: non-finite {what} value", line)
            rows.append(vals)
    if rows and len({len(r) for r in rows}) != 1:
        raise SchemaError(f"{path}: ragged {what} rows")
    return np.asarray(rows)


def load_nodelink_json(path, feats_path=None, labels_path=None) -> list[FixedGraphSample]:
    """Read a node-link graph file plus its ``feats.csv`` and ``labels.csv`` siblings.

    Nodes carry ``id``, optional ``split`` and optional ``graph`` (several
    graphs may share one file).  Feature and label rows follow the node
    order.  Unless ``"directed": true``, links are expanded both ways.
    """
    path = Path(path)
    feats_path = Path(feats_path) if feats_path else path.parent / "feats.csv"
    labels_path = Path(labels_path) if labels_path else path.parent / "labels.csv"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.lineno) from None
    if "nodes" not in doc or "links" not in doc:
        raise SchemaError(f"{path}: expected 'nodes' and 'links'")
    nodes = doc["nodes"]
    ids = [n["id"] for n in nodes]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate node id")
    pos = {nid: i for i, nid in enumerate(ids)}
    feats = _read_matrix(feats_path, "feature")
    labels = _read_matrix(labels_path, "label")
    if feats.shape[0] != len(nodes):
        raise SchemaError(f"{feats_path}: {feats.shape[0]} rows for {len(nodes)} nodes")
    if labels.shape[0] != len(nodes):
        raise SchemaError(f"{labels_path}: {labels.shape[0]} rows for {len(nodes)} nodes")
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise SchemaError(f"{labels_path}: labels must be 0/1")
    edges = []
    for link in doc["links"]:
        s, t = link.get("source"), link.get("target")
        if s not in pos or t not in pos:
            raise SchemaError(f"{path}: link {s}->{t} references an unknown node")
        edges.append((pos[s], pos[t]))
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if not doc.get("directed", False):
        edges = np.concatenate([edges, edges[:, ::-1]])
    edges = edges[edges[:, 0] != edges[:, 1]]
    edges = np.unique(edges, axis=0) if edges.size else edges

    gid = np.asarray([n.get("graph", 0) for n in nodes])
    split = np.asarray([n.get("split", "train") for n in nodes])
    samples = []
    for g in np.unique(gid):
        members = np.flatnonzero(gid == g)
        local = -np.ones(len(nodes), dtype=np.int64)
        local[members] = np.arange(members.size)
        mine = np.isin(edges[:, 0], members)
        if np.any(mine != np.isin(edges[:, 1], members)):
            raise SchemaError(f"{path}: link crosses graphs")
        tags = set(split[members])
        if len(tags) != 1:
            raise SchemaError(f"{path}: graph {g} mixes splits {sorted(tags)}")
        samples.append(FixedGraphSample(feats[members], local[edges[mine]],
                                        labels[members].astype(np.int8), tags.pop()))
    return samples


def save_nodelink_json(samples, directory, directed=False) -> Path:
    """Write samples as ``graph.json`` + ``feats.csv`` + ``labels.csv`` in ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nodes, links, offset = [], [], 0
    for g, s in enumerate(samples):
        nodes += [{"id": offset + i, "split": s.split, "graph": g} for i in range(s.n)]
        e = s.edges if directed else s.edges[s.edges[:, 0] < s.edges[:, 1]]
        links += [{"source": int(a) + offset, "target": int(b) + offset} for a, b in e]
        offset += s.n
    path = directory / "graph.json"
    path.write_text(json.dumps({"directed": directed, "nodes": nodes, "links": links}))
    np.savetxt(directory / "feats.csv", np.concatenate([s.features for s in samples]), delimiter=",", fmt="%.9g")
    np.savetxt(directory / "labels.csv", np.concatenate([s.labels for s in samples]), delimiter=",", fmt="%d")
    return path


def fixed_edges_to_table(sample: FixedGraphSample, k: int, rng=None):
    """Adapt variable-degree edges to a fixed fan-in table.

    Returns ``(table, isolated)``.  Degree >= k: k distinct neighbours drawn
    without replacement.  Degree in [1, k): every neighbour once, in random
    order, then padded with neighbours repeated in random subsets.  Isolated
    vertices get k copies of the nearest-id other vertex and are reported.
    """
    rng = np.random.default_rng(rng)
    n = sample.n
    if n < 2:
        raise ValueError("fixed-edge graphs need at least two vertices")
    e = sample.edges[sample.edges[:, 0] != sample.edges[:, 1]]
    order = np.argsort(e[:, 0], kind="stable")
    e = e[order]
    starts = np.searchsorted(e[:, 0], np.arange(n + 1))
    table = np.empty((n, k), dtype=np.int64)
    for v in range(n):
        nb = np.unique(e[starts[v]:starts[v + 1], 1])
        deg = nb.size
        if deg >= k:
            table[v] = rng.choice(nb, size=k, replace=False)
        elif deg > 0:
            row = list(rng.permutation(nb))
            while len(row) < k:
                row += list(rng.permutation(nb)[: k - len(row)])
            table[v] = row
        else:
            table[v] = v - 1 if v > 0 else 1
    isolated = np.flatnonzero(starts[1:] == starts[:-1])
    return NeighborTable(table, distinct=False), isolated


# --------------------------------------------------------------------------
# batching


def pointcloud_batches(samples, batch_size, rng=None, shuffle=True, channels=None):
    """Yield GraphBatches of point clouds; ``channels`` selects feature columns."""
    order = np.arange(len(samples))
    if shuffle:
        order = np.random.default_rng(rng).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        feats = [s.features if channels is None else s.features[:, :channels] for s in chunk]
        yield GraphBatch.stack(feats, [s.labels for s in chunk])


def fixed_graph_batches(samples, tables, batch_size, rng=None, shuffle=True):
    """Yield GraphBatches of fixed-edge graphs with their precomputed neighbour tables."""
    order = np.arange(len(samples))
    if shuffle:
        order = np.random.default_rng(rng).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield GraphBatch.stack([samples[i].features for i in idx], [samples[i].labels for i in idx],
                               [tables[i] for i in idx])


class PointCloudDataset:
    """Single-label point clouds with dynamic or coordinate-based edges."""

    multilabel = False

    def __init__(self, samples, num_classes=None, channels=None):
        self.samples = list(samples)
        if not self.samples:
            raise ValueError("empty dataset")
        self.channels = channels
        self.num_classes = num_classes or int(max(s.labels.max() for s in self.samples)) + 1

    def __len__(self):
        return len(self.samples)

    @property
    def in_channels(self):
        return self.channels or self.samples[0].features.shape[1]

    def batches(self, batch_size, rng=None, shuffle=False):
        return pointcloud_batches(self.samples, batch_size, rng, shuffle, self.channels)


class FixedGraphDataset:
    """Fixed-edge graphs (multi-label unless labels are 1-D); tables are built once."""

    def __init__(self, samples, k, seed=0):
        self.samples = list(samples)
        if not self.samples:
            raise ValueError("empty dataset")
        self.k = k
        built = [fixed_edges_to_table(s, k, np.random.default_rng([seed, i]))
                 for i, s in enumerate(self.samples)]
        self.tables = [t for t, _ in built]
        self.isolated = [iso for _, iso in built]
        self.multilabel = self.samples[0].labels.ndim == 2
        if self.multilabel:
            self.num_classes = self.samples[0].labels.shape[1]
        else:
            self.num_classes = int(max(s.labels.max() for s in self.samples)) + 1

    def __len__(self):
        return len(self.samples)

    @property
    def in_channels(self):
        return self.samples[0].features.shape[1]

    def split(self, tag) -> "FixedGraphDataset":
        keep = [i for i, s in enumerate(self.samples) if s.split == tag]
        out = object.__new__(FixedGraphDataset)
        out.__dict__.update(self.__dict__)
        out.samples = [self.samples[i] for i in keep]
        out.tables = [self.tables[i] for i in keep]
        out.isolated = [self.isolated[i] for i in keep]
        return out

    def batches(self, batch_size, rng=None, shuffle=False):
        return fixed_graph_batches(self.samples, self.tables, batch_size, rng, shuffle)


def gen_synthetic_graphs(n_graphs, n_nodes=64, n_features=8, n_labels=4, degree=6, seed=0,
                         splits=("train",)):
    """Random geometric graphs with multi-label targets that depend on the neighbourhood.

    Each vertex links to its ``degree`` nearest neighbours in a hidden 2-D
    layout (links are kept directed, so in-degrees vary).  A label fires when
    a fixed random projection of the vertex's mean neighbour features is
    positive.  Graph ``i`` gets split tag ``splits[i % len(splits)]``.
    """
    proj = np.random.default_rng([seed, 1 << 20]).normal(size=(n_features, n_labels))
    samples = []
    for i in range(n_graphs):
        rng = np.random.default_rng([seed, i])
        pos = rng.random((n_nodes, 2))
        d2 = ((pos[:, None] - pos[None]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        nbrs = np.argsort(d2, axis=1, kind="stable")[:, :degree]
        edges = np.column_stack([np.repeat(np.arange(n_nodes), degree), nbrs.ravel()])
        feats = rng.normal(size=(n_nodes, n_features))
        labels = (feats[nbrs].mean(axis=1) @ proj > 0).astype(np.int8)
        samples.append(FixedGraphSample(feats, edges, labels, splits[i % len(splits)]))
    return samples


# --------------------------------------------------------------------------
# run-level data selection


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | csv | nodelink
    path: str = ""
    n_points: int = 512
    n_shapes: int = 32
    eval_shapes: int = 0
    parts: tuple[str, ...] = PRIMITIVES
    data_seed: int = 0
    block_size: float = 1.0
    block_points: int = 4096
    fixed_k: int = 8

    def __post_init__(self):
        if self.source not in ("synthetic", "csv", "nodelink"):
            raise ConfigError(f"data source must be synthetic, csv or nodelink, got {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise ConfigError(f"data source {self.source} needs a path")
        if self.eval_shapes < 0 or self.n_shapes < 1:
            raise ConfigError("n_shapes must be >= 1 and eval_shapes >= 0")


def load_datasets(cfg: DataConfig):
    """Return ``(train_set, eval_set)``; the eval set is the train set when nothing is held out."""
    if cfg.source == "nodelink":
        samples = load_nodelink_json(cfg.path)
        full = FixedGraphDataset(samples, cfg.fixed_k, cfg.data_seed)
        train = full.split("train")
        if not len(train.samples):
            raise SchemaError(f"{cfg.path}: no graphs tagged 'train'")
        for tag in ("val", "test"):
            held = full.split(tag)
            if held.samples:
                return train, held
        return train, train
    if cfg.source == "synthetic":
        samples = gen_synthetic_parts(cfg.n_points, cfg.n_shapes + cfg.eval_shapes, cfg.data_seed, cfg.parts)
        num_classes = len(cfg.parts)
    else:
        root = Path(cfg.path)
        files = sorted(root.glob("*.csv")) if root.is_dir() else [root]
        if not files:
            raise FileNotFoundError(f"no .csv files under {root}")
        samples = [block_sample(load_pointcloud_csv(f), cfg.block_size, cfg.block_points,
                                np.random.default_rng([cfg.data_seed, i]))
                   for i, f in enumerate(files)]
        num_classes = int(max(s.labels.max() for s in samples)) + 1
    if cfg.eval_shapes >= len(samples):
        raise ConfigError(f"eval_shapes={cfg.eval_shapes} leaves no training samples")
    cut = len(samples) - cfg.eval_shapes
    train = PointCloudDataset(samples[:cut], num_classes)
    held = PointCloudDataset(samples[cut:], num_classes) if cfg.eval_shapes else train
    return train, held
