"""Compiled elementwise kernels for fake quantization.

Every forward kernel flags elements whose rounding step was a near-tie.
Float64 evaluation of ``x * (2^b - 1) / d`` carries at most a few ulps of
error, so values whose fractional part sits within that band of 0.5 are
re-resolved exactly by the caller.
"""

import math

import numba
import numpy as np

# Relative error bound (in units of |t| + 1) of the float64 index evaluation.
TIE_TOL = 8.0 * 2.0**-53

BIT_LEVELS = (2, 4, 8, 16, 32)


@numba.njit(cache=True, inline="always")
def transform_bits(g):
    if g <= 0.0:
        return 0
    if g <= 1.0:
        return 2
    if g <= 2.0:
        return 4
    if g <= 3.0:
        return 8
    if g <= 4.0:
        return 16
    return 32


@numba.njit(cache=True, inline="always")
def _n_levels(tb):
    # number of grid levels (2, 4, ..., tb) taking part in the gated sum
    if tb == 0:
        return 0
    if tb == 2:
        return 1
    if tb == 4:
        return 2
    if tb == 8:
        return 3
    if tb == 16:
        return 4
    return 5


@numba.njit(cache=True)
def level_constants(beta, signed, bits):
    """Per bit-width: index scale ``m/d``, step ``d/m`` and max index."""
    n = bits.size
    scale = np.empty(n)
    step = np.empty(n)
    n_hi = np.empty(n)
    d = 2.0 * beta if signed else beta
    for l in range(n):
        m = 2.0**bits[l] - 1.0
        scale[l] = m / d
        step[l] = d / m
        n_hi[l] = (m - 1.0) * 0.5 if signed else m
    return scale, step, n_hi


@numba.njit(cache=True, inline="always")
def _index(xv, beta, signed, scale, n_hi):
    """Rounded grid index (half away from zero) and near-tie flag."""
    if xv >= beta:
        return n_hi, False
    if signed:
        if xv <= -beta:
            return -n_hi, False
    elif xv <= 0.0:
        return 0.0, False
    t = xv * scale
    a = abs(t)
    near = abs(a - np.floor(a) - 0.5) <= TIE_TOL * (a + 1.0)
    n = np.floor(a + 0.5)
    if n > n_hi:
        n = n_hi
    return math.copysign(n, t), near


@numba.njit(cache=True)
def quantize_kernel(x, bits, beta, signed, out, flags):
    """``x`` flattened; ``bits`` index into ``BIT_LEVELS`` order is not
    assumed: each entry is the literal bit-width, repeating every
    ``bits.size`` elements."""
    period = bits.size
    scale, step, n_hi = level_constants(beta, signed, bits)
    n_flagged = 0
    for o in range(x.size // period):
        base = o * period
        for j in range(period):
            i = base + j
            n, near = _index(np.float64(x[i]), beta, signed, scale[j], n_hi[j])
            out[i] = np.float32(n * step[j])
            if near:
                flags[i] = 1
                n_flagged += 1
    return n_flagged


@numba.njit(cache=True)
def _gated_block(x, lo, hi, nl, alpha, beta, scale, step, n_hi, out, flags):
    """Gated sum over ``x[lo:hi]`` with one shared level count ``nl``."""
    n_flagged = 0
    for i in range(lo, hi):
        xv = np.float64(x[i])
        xc = min(max(xv, alpha), beta)
        inside = xv > alpha and xv < beta
        near = False
        prev = 0.0
        inner = 0.0
        first = 0.0
        for l in range(nl):
            t = xc * scale[l]
            a = abs(t)
            r = a + 0.5
            n = np.floor(r)
            f = r - n
            near = near or f <= TIE_TOL * r or f >= 1.0 - TIE_TOL * r
            v = np.float64(np.float32(math.copysign(min(n, n_hi[l]), t) * step[l]))
            if l == 0:
                first = v
            else:
                # accumulated outermost-first; the float64 sum of grid values
                # is exact, so order does not change the rounded result
                inner += v - prev
            prev = v
        out[i] = np.float32(first + inner)
        if near and inside:
            flags[i] = 1
            n_flagged += 1
    return n_flagged


@numba.njit(cache=True)
def gated_kernel(x, gates, beta, signed, out, flags):
    """Gated residual sum ``G2[x2 + G4[e4 + G8[e8 + G16[e16 + G32 e32]]]]``
    evaluated in float64; gates repeat every ``gates.size`` elements."""
    period = gates.size
    levels = np.array([2, 4, 8, 16, 32])
    scale, step, n_hi = level_constants(beta, signed, levels)
    alpha = -beta if signed else 0.0
    if period == 1:
        nl = _n_levels(transform_bits(np.float64(gates[0])))
        if nl == 0:
            out[:] = 0.0
            return 0
        return _gated_block(x, 0, x.size, nl, alpha, beta, scale, step, n_hi, out, flags)
    n_levels = np.empty(period, dtype=np.int64)
    for j in range(period):
        n_levels[j] = _n_levels(transform_bits(np.float64(gates[j])))
    n_flagged = 0
    for o in range(x.size // period):
        base = o * period
        for j in range(period):
            i = base + j
            if n_levels[j] == 0:
                out[i] = 0.0
            else:
                n_flagged += _gated_block(x, i, i + 1, n_levels[j], alpha, beta,
                                          scale, step, n_hi, out, flags)
    return n_flagged


@numba.njit(cache=True)
def fq_backward_kernel(x, q, dq, beta, signed, dx):
    """STE gradient into ``dx`` and the summed range gradient.

    dQ/dbeta is ``q / beta`` in range, 1 above it, and -1 (signed) or 0
    (unsigned) below it.
    """
    alpha = -beta if signed else 0.0
    inv_beta = 1.0 / beta
    dbeta = 0.0
    for i in range(x.size):
        xv = x[i]
        g = dq[i]
        if xv > beta:
            dx[i] = 0.0
            dbeta += g
        elif xv < alpha:
            dx[i] = 0.0
            if signed:
                dbeta -= g
        else:
            dx[i] = g
            dbeta += g * (np.float64(q[i]) * inv_beta)
    return dbeta
