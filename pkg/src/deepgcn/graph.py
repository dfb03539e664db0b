"""Graph container and the vertex-wise combination primitives.

Vertex features are plain :class:`Tensor` objects of shape (N, D); the
neighbour structure is a rectangular (N, k) index table without self-loops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from . import ops
from .autodiff import Tensor
from .errors import DimensionError


@dataclass(frozen=True)
class NeighborTable:
    """Fixed fan-in neighbour lists, one row per vertex.

    Rows never contain their own vertex id.  ``distinct=False`` permits
    repeated entries within a row, which only fixed-edge padding produces.
    """

    indices: np.ndarray
    distinct: bool = True

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 2 or idx.shape[1] < 1:
            raise DimensionError(f"neighbor table must be N x k with k >= 1, got {idx.shape}")
        if idx.dtype.kind not in "iu":
            raise TypeError("neighbor indices must be integers")
        n = idx.shape[0]
        if idx.min() < 0 or idx.max() >= n:
            raise IndexError(f"neighbor index out of range [0, {n})")
        if np.any(idx == np.arange(n)[:, None]):
            raise ValueError("neighbor table contains a self-loop")
        if self.distinct and idx.shape[1] > 1:
            s = np.sort(idx, axis=1)
            if np.any(s[:, 1:] == s[:, :-1]):
                raise ValueError("neighbor table row contains repeated entries")
        object.__setattr__(self, "indices", idx.astype(np.int64, copy=False))

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def permuted(self, perm) -> "NeighborTable":
        """Relabel vertices: new vertex ``i`` is old vertex ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return NeighborTable(inv[self.indices[perm]], self.distinct)


@dataclass
class Graph:
    features: Tensor
    neighbors: NeighborTable

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DimensionError(f"vertex features must be N x D, got {self.features.shape}")
        if self.features.shape[0] != self.neighbors.n:
            raise DimensionError(
                f"{self.features.shape[0]} vertices but {self.neighbors.n} neighbor rows")

    @property
    def n(self) -> int:
        return self.features.shape[0]


def add_features(a: Tensor, b: Tensor) -> Tensor:
    """Vertex-wise sum, used by residual connections."""
    if a.shape != b.shape:
        raise DimensionError(f"add_features: {a.shape} vs {b.shape}")
    return ops.add(a, b)


def concat_features(parts) -> Tensor:
    """Vertex-wise concatenation in list order, used by dense connections."""
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_features: nothing to concatenate")
    n = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != n:
            raise DimensionError(f"concat_features: row count {p.shape[0]} != {n}")
    return ops.concat_last(parts)


def gather_neighbors(features: Tensor, nbrs: NeighborTable) -> Tensor:
    """(N, k, D) tensor whose slot (v, j) holds the features of v's j-th neighbour."""
    if features.shape[0] != nbrs.n:
        raise DimensionError(f"{features.shape[0]} vertices but {nbrs.n} neighbor rows")
    return ops.gather_rows(features, nbrs.indices)


def feature_diversity(features) -> float:
    """Mean pairwise L2 distance between vertex feature rows."""
    x = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("feature_diversity needs at least two vertices")
    # rescale so squared distances neither underflow nor overflow
    scale = np.abs(x).max()
    if scale == 0 or not np.isfinite(scale):
        return float(pdist(x).mean())
    return float(pdist(x / scale).mean() * scale)


@dataclass
class GraphBatch:
    """Several graphs stacked row-wise; graph ``i`` owns rows ``offsets[i]:offsets[i+1]``.

    ``neighbors`` (global row ids) is required only for fixed-edge models.
    ``labels`` is int[V] for single-label tasks or {0,1}[V, C] for multi-label.
    """

    features: np.ndarray
    offsets: np.ndarray
    neighbors: NeighborTable | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        v = self.features.shape[0]
        if self.features.ndim != 2:
            raise DimensionError(f"batch features must be V x D, got {self.features.shape}")
        if self.offsets[0] != 0 or self.offsets[-1] != v or np.any(np.diff(self.offsets) <= 0):
            raise DimensionError("batch offsets must partition the vertices into non-empty graphs")
        if self.neighbors is not None and self.neighbors.n != v:
            raise DimensionError(f"{v} vertices but {self.neighbors.n} neighbor rows")
        if self.labels is not None and len(self.labels) != v:
            raise DimensionError(f"{v} vertices but {len(self.labels)} labels")

    @property
    def n_graphs(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_vertices(self) -> int:
        return self.features.shape[0]

    def graph_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_graphs), np.diff(self.offsets))

    @classmethod
    def stack(cls, features, labels=None, tables=None) -> "GraphBatch":
        """Stack per-graph arrays; per-graph neighbour tables are shifted to global ids."""
        features = [np.asarray(f) for f in features]
        sizes = [f.shape[0] for f in features]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        nb = None
        if tables is not None:
            nb = NeighborTable(
                np.concatenate([t.indices + o for t, o in zip(tables, offsets[:-1])]),
                distinct=all(t.distinct for t in tables))
        lab = None if labels is None else np.concatenate([np.asarray(l) for l in labels])
        return cls(np.concatenate(features), offsets, nb, lab)
