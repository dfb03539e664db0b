"""Exact k-NN search, dilated neighbourhoods and stochastic dilation.

Points may hold several independent graphs stacked row-wise; ``offsets``
(length B+1) marks the blocks and neighbours never cross a block boundary.
Returned indices are global row ids.

Ordering rule: ascending squared L2 distance, ties broken by ascending
vertex id.  For inputs with at most ``DIRECT_DIFF_MAX_DIM`` channels the
squared distance is summed from explicit coordinate differences; wider
inputs use ``|x|^2 + |y|^2 - 2 x.y`` in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import NeighborTable

DIRECT_DIFF_MAX_DIM = 8


@dataclass(frozen=True)
class DilationPlan:
    k: int
    d: int = 1
    epsilon: float = 0.0
    deterministic: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.d < 1:
            raise ValueError(f"dilation must be >= 1, got {self.d}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")

    @property
    def stochastic(self) -> bool:
        return not self.deterministic and self.epsilon > 0


def clamp_dilation(n: int, k: int, d: int) -> int:
    """Largest usable dilation <= d so that k*d candidates exist among n-1 others."""
    if k > n - 1:
        raise ValueError(f"fan-in {k} needs at least {k + 1} vertices, graph has {n}")
    return max(1, min(d, (n - 1) // k))


def _as_array(points) -> np.ndarray:
    x = np.asarray(getattr(points, "data", points), dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"points must be N x D, got shape {x.shape}")
    return x


def _offsets(n, offsets):
    if offsets is None:
        return np.array([0, n])
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets[0] != 0 or offsets[-1] != n or np.any(np.diff(offsets) <= 0):
        raise ValueError("offsets must partition the points into non-empty blocks")
    return offsets


def squared_distances(x: np.ndarray) -> np.ndarray:
    """Pairwise squared L2 distances with +inf on the diagonal."""
    if x.shape[1] <= DIRECT_DIFF_MAX_DIM:
        d2 = np.zeros((x.shape[0], x.shape[0]))
        for c in range(x.shape[1]):
            diff = x[:, None, c] - x[None, :, c]
            d2 += diff * diff
    else:
        sq = np.einsum("ij,ij->i", x, x)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
        np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)
    return d2


def _sorted_block(x: np.ndarray, m: int) -> np.ndarray:
    n = x.shape[0]
    d2 = squared_distances(x)
    if m >= n - 1:
        return np.argsort(d2, axis=1, kind="stable")[:, :m]
    part = np.argpartition(d2, m - 1, axis=1)[:, :m]
    vals = np.take_along_axis(d2, part, axis=1)
    order = np.lexsort((part, vals), axis=-1)
    out = np.take_along_axis(part, order, axis=1)
    # argpartition is arbitrary among values equal to the m-th distance
    thresh = vals.max(axis=1)
    tied = np.flatnonzero((d2 <= thresh[:, None]).sum(axis=1) > m)
    for r in tied:
        out[r] = np.argsort(d2[r], kind="stable")[:m]
    return out


def sorted_neighbors(points, m: int, offsets=None) -> np.ndarray:
    """The m nearest other vertices of every vertex, nearest first (global ids)."""
    x = _as_array(points)
    offsets = _offsets(x.shape[0], offsets)
    if m < 1:
        raise ValueError("m must be >= 1")
    blocks = []
    for s, e in zip(offsets[:-1], offsets[1:]):
        if m > e - s - 1:
            raise ValueError(f"cannot select {m} neighbours in a graph of {e - s} vertices")
        blocks.append(_sorted_block(x[s:e], m) + s)
    return np.concatenate(blocks, axis=0)


def knn_bruteforce(points, m: int, offsets=None) -> NeighborTable:
    return NeighborTable(sorted_neighbors(points, m, offsets))


def select_dilated(candidates: np.ndarray, k: int, d: int, epsilon=0.0, rng=None):
    """Pick k of the k*d sorted candidates per row.

    Returns ``(indices, random_rows)``.  A row takes the strided positions
    0, d, ..., (k-1)d unless its Bernoulli(epsilon) draw selects the random
    branch, in which case k distinct candidates are drawn uniformly (kept in
    distance order).
    """
    rows, kd = candidates.shape
    if kd != k * d:
        raise ValueError(f"expected {k * d} candidates per row, got {kd}")
    out = candidates[:, ::d][:, :k].copy()
    random_rows = np.zeros(rows, dtype=bool)
    if epsilon > 0:
        if rng is None:
            raise ValueError("stochastic dilation needs a random generator")
        random_rows = rng.random(rows) < epsilon
        r = np.flatnonzero(random_rows)
        if r.size:
            keys = rng.random((r.size, kd))
            pos = np.sort(np.argsort(keys, axis=1)[:, :k], axis=1)
            out[r] = np.take_along_axis(candidates[r], pos, axis=1)
    return out, random_rows


def dilated_knn(points, plan: DilationPlan, rng=None, offsets=None, return_random_rows=False):
    """Dilated k-NN table; the dilation is clamped per graph for small graphs."""
    x = _as_array(points)
    offsets = _offsets(x.shape[0], offsets)
    eps = plan.epsilon if plan.stochastic else 0.0
    parts, flags = [], []
    for s, e in zip(offsets[:-1], offsets[1:]):
        d = clamp_dilation(e - s, plan.k, plan.d)
        cand = _sorted_block(x[s:e], plan.k * d) + s
        idx, rnd = select_dilated(cand, plan.k, d, eps, rng)
        parts.append(idx)
        flags.append(rnd)
    table = NeighborTable(np.concatenate(parts, axis=0))
    if return_random_rows:
        return table, np.concatenate(flags)
    return table


def dynamic_rebuild(features, plan: DilationPlan, rng=None, offsets=None) -> NeighborTable:
    """Per-layer edge reconstruction in the current feature space.

    Identical to :func:`dilated_knn`; kept as the named hook the model calls
    after each backbone layer.
    """
    return dilated_knn(features, plan, rng, offsets)
