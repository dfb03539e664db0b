"""numba kernels for the two hot loops of neighbourhood aggregation."""

import numpy as np
from numba import njit


@njit(cache=True)
def max_argmax_axis1(x):
    n, k, d = x.shape
    out = np.empty((n, d), x.dtype)
    arg = np.zeros((n, d), np.uint8)
    for i in range(n):
        for c in range(d):
            out[i, c] = x[i, 0, c]
        for j in range(1, k):
            for c in range(d):
                v = x[i, j, c]
                if v > out[i, c]:
                    out[i, c] = v
                    arg[i, c] = j
    return out, arg


@njit(cache=True)
def max_backward_axis1(g, arg, k):
    n, d = g.shape
    full = np.zeros((n, k, d), g.dtype)
    for i in range(n):
        for c in range(d):
            full[i, arg[i, c], c] = g[i, c]
    return full


@njit(cache=True)
def scatter_add_rows(idx, g, n):
    """out[idx[i, j]] += g[i, j] for a 2-D index table and (m, k, d) gradient."""
    m, k, d = g.shape
    out = np.zeros((n, d), g.dtype)
    for i in range(m):
        for j in range(k):
            r = idx[i, j]
            for c in range(d):
                out[r, c] += g[i, j, c]
    return out
