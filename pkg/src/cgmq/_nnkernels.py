"""Compiled data-movement loops for the CNN layers (im2col, col2im, pooling).

All arithmetic that matters numerically stays in numpy/BLAS; these loops only
copy, scatter-add, or compare.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def im2col(x, k):
    """``(N, C, H, W)`` -> ``(N*oh*ow, C*k*k)`` for a valid stride-1 window."""
    n, c, h, w = x.shape
    oh, ow = h - k + 1, w - k + 1
    cols = np.empty((n * oh * ow, c * k * k), dtype=x.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                col = 0
                for ch in range(c):
                    for di in range(k):
                        for dj in range(k):
                            cols[row, col] = x[b, ch, i + di, j + dj]
                            col += 1
    return cols


@numba.njit(cache=True)
def col2im(dcols, n, c, h, w, k):
    """Adjoint of ``im2col``: scatter-add columns back onto the image."""
    oh, ow = h - k + 1, w - k + 1
    dx = np.zeros((n, c, h, w), dtype=dcols.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                col = 0
                for ch in range(c):
                    for di in range(k):
                        for dj in range(k):
                            dx[b, ch, i + di, j + dj] += dcols[row, col]
                            col += 1
    return dx


@numba.njit(cache=True)
def rows_to_nchw(mat, n, o, oh, ow):
    """``(N*oh*ow, O)`` -> ``(N, O, oh, ow)``."""
    out = np.empty((n, o, oh, ow), dtype=mat.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                for ch in range(o):
                    out[b, ch, i, j] = mat[row, ch]
    return out


@numba.njit(cache=True)
def nchw_to_rows(x):
    """``(N, O, oh, ow)`` -> ``(N*oh*ow, O)``."""
    n, o, oh, ow = x.shape
    mat = np.empty((n * oh * ow, o), dtype=x.dtype)
    for b in range(n):
        for ch in range(o):
            for i in range(oh):
                for j in range(ow):
                    mat[(b * oh + i) * ow + j, ch] = x[b, ch, i, j]
    return mat


@numba.njit(cache=True)
def maxpool_forward(x, s):
    """Non-overlapping max pooling; ``arg`` holds the flat in-window index of
    the first maximum (row-major scan)."""
    n, c, h, w = x.shape
    oh, ow = h // s, w // s
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int8)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    best = x[b, ch, i * s, j * s]
                    where = 0
                    for di in range(s):
                        for dj in range(s):
                            v = x[b, ch, i * s + di, j * s + dj]
                            if v > best:
                                best = v
                                where = di * s + dj
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = where
    return out, arg


@numba.njit(cache=True)
def maxpool_backward(dout, arg, s, h, w):
    n, c, oh, ow = dout.shape
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    a = arg[b, ch, i, j]
                    dx[b, ch, i * s + a // s, j * s + a % s] = dout[b, ch, i, j]
    return dx
