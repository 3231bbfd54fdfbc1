"""Compiled inner loops. Every loop order here is fixed; results are
bit-reproducible for a given build and do not depend on the thread count."""

import numba
import numpy as np

numba.config.THREADING_LAYER = "workqueue"


@numba.njit(cache=True, parallel=True)
def matmul_kernel(a, b, out):
    n, m = a.shape
    p = b.shape[1]
    for i in numba.prange(n):
        for j in range(p):
            out[i, j] = 0
        for k in range(m):
            aik = a[i, k]
            for j in range(p):
                out[i, j] += aik * b[k, j]


@numba.njit(cache=True)
def winner_scatter_kernel(x, f, rows, fidx, g, dx, df):
    """For every winning pair (row r, filter q) with upstream gradient g:
    df[q] += g * x[r] and dx[r] += g * f[q]."""
    n, k = rows.shape
    m = x.shape[1]
    for i in range(n):
        for j in range(k):
            gv = g[i, j]
            if gv == 0:
                continue
            r = rows[i, j]
            q = fidx[i, j]
            for t in range(m):
                df[q, t] += gv * x[r, t]
                dx[r, t] += gv * f[q, t]


@numba.njit(cache=True)
def winner_sum_kernel(g, fidx, vals, out):
    """out[q] += g * vals over winning pairs (per-filter scalar sums)."""
    n, k = fidx.shape
    for i in range(n):
        for j in range(k):
            out[fidx[i, j]] += g[i, j] * vals[i, j]


def set_threads(n):
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n



@numba.njit(cache=True)
def winner_dot_kernel(x, f, fidx, out):
    """out[i, j] = x[i] . f[fidx[i, j]], accumulated left to right."""
    n, k = fidx.shape
    m = x.shape[1]
    for i in range(n):
        for j in range(k):
            q = fidx[i, j]
            acc = 0.0
            for t in range(m):
                acc += x[i, t] * f[q, t]
            out[i, j] = acc
