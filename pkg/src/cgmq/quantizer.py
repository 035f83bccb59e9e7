"""Fake quantization of weights and activations.

The quantizer maps a real value onto the uniform grid of multiples of the
step ``s = (beta - alpha) / (2^b - 1)`` that lie inside ``[alpha, beta]``,
with ``alpha = -beta`` for signed tensors and ``alpha = 0`` otherwise:

    Q(x, b) = s * round(clip(x, alpha, beta) / s)

Rounding is half away from zero.  For signed tensors the grid is symmetric
around zero and the largest index is ``2^(b-1) - 1``; the boundary tie at
``x = +-beta`` resolves inward so outputs never leave the range.

Variable bit-widths are realized by the gated residual sum

    x_b = G2[x2 + G4[e4 + G8[e8 + G16[e16 + G32 e32]]]]

with ``e_j = Q(x, j) - Q(x, j/2)``.  Everything is evaluated in float64 and
rounded once to float32, which makes the gated sum bit-identical to a direct
quantization at ``T(g)`` bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import _kernels
from ._kernels import BIT_LEVELS

BETA_FLOOR = 1e-6


@dataclass
class QuantRange:
    """Per-tensor clipping range; ``alpha`` is derived, never stored."""

    beta: np.ndarray
    signed: bool = True
    learnable: bool = True

    def __post_init__(self):
        self.beta = np.array(max(float(self.beta), BETA_FLOOR), dtype=np.float32)
        self.signed = bool(self.signed)

    @property
    def alpha(self) -> float:
        return -float(self.beta) if self.signed else 0.0

    def clamp(self) -> None:
        if self.beta < BETA_FLOOR:
            self.beta[...] = BETA_FLOOR


def _as_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def _exact_index(x: float, beta: float, signed: bool, bits: int) -> int:
    m = 2**bits - 1
    if signed:
        n_hi = (m - 1) // 2
        if x >= beta:
            return n_hi
        if x <= -beta:
            return -n_hi
        t = Fraction(x) * m / (2 * Fraction(beta))
    else:
        n_hi = m
        if x >= beta:
            return n_hi
        if x <= 0.0:
            return 0
        t = Fraction(x) * m / Fraction(beta)
    n = min(math.floor(abs(t) + Fraction(1, 2)), n_hi)
    return n if t >= 0 else -n


def _exact_value(x: float, beta: float, signed: bool, bits: int) -> float:
    n = _exact_index(x, beta, signed, bits)
    m = 2.0**bits - 1.0
    d = 2.0 * beta if signed else beta
    return float(np.float32(float(n) * (d / m)))


def _exact_gated(x: float, g: float, beta: float, signed: bool) -> np.float32:
    tb = int(_kernels.transform_bits(g))
    if tb == 0:
        return np.float32(0.0)
    levels = {j: _exact_value(x, beta, signed, j) for j in BIT_LEVELS if j <= tb}
    inner = 0.0
    for j in (32, 16, 8, 4):
        if j <= tb:
            inner = (levels[j] - levels[j // 2]) + inner
    return np.float32(levels[2] + inner)


def _check_bits(bits: np.ndarray) -> None:
    if not np.isin(bits, BIT_LEVELS).all():
        bad = np.setdiff1d(np.unique(bits), BIT_LEVELS)
        raise ValueError(f"bit-width must be one of {BIT_LEVELS}, got {bad.tolist()}")


def _per_element(arr, x_shape) -> np.ndarray:
    """Flatten a per-tensor or trailing-broadcast array so that element ``i``
    of the flattened input uses entry ``i % arr.size``."""
    arr = np.asarray(arr)
    if arr.ndim == 0:
        return arr.reshape(1)
    if arr.shape != tuple(x_shape[len(x_shape) - arr.ndim:]):
        arr = np.broadcast_to(arr, x_shape[len(x_shape) - arr.ndim:])
    return np.ascontiguousarray(arr).reshape(-1)


def quantize(x, bits, qrange: QuantRange) -> np.ndarray:
    """Quantize ``x`` at ``bits`` (scalar or array broadcast over the trailing
    axes of ``x``) and return float32 values on the grid."""
    x = _as_f32(x)
    bits = np.asarray(bits)
    _check_bits(bits)
    b = _per_element(bits.astype(np.int64), x.shape)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    flags = np.zeros(flat.size, dtype=np.uint8)
    beta = float(qrange.beta)
    if _kernels.quantize_kernel(flat, b, beta, qrange.signed, out, flags):
        for i in np.flatnonzero(flags):
            out[i] = _exact_value(float(flat[i]), beta, qrange.signed, int(b[i % b.size]))
    return out.reshape(x.shape)


def gated_quantize(x, gate, qrange: QuantRange) -> np.ndarray:
    """Quantize through the gated residual decomposition controlled by gate
    value(s) ``gate`` (per tensor or per trailing element)."""
    x = _as_f32(x)
    g = _per_element(np.asarray(gate, dtype=np.float64), x.shape)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    flags = np.zeros(flat.size, dtype=np.uint8)
    beta = float(qrange.beta)
    if _kernels.gated_kernel(flat, g, beta, qrange.signed, out, flags):
        for i in np.flatnonzero(flags):
            out[i] = _exact_gated(float(flat[i]), float(g[i % g.size]), beta, qrange.signed)
    return out.reshape(x.shape)


def residuals(x, qrange: QuantRange) -> dict[int, np.ndarray]:
    """Return ``{2: x2, 4: e4, 8: e8, 16: e16, 32: e32}`` in float64."""
    levels = {b: quantize(x, b, qrange).astype(np.float64) for b in BIT_LEVELS}
    out = {2: levels[2]}
    for b in BIT_LEVELS[1:]:
        out[b] = levels[b] - levels[b // 2]
    return out


def in_range_mask(x, qrange: QuantRange) -> np.ndarray:
    beta = qrange.beta
    if qrange.signed:
        return (x >= -beta) & (x <= beta)
    return (x >= 0) & (x <= beta)


def ste_backward(grad, x, qrange: QuantRange) -> np.ndarray:
    """Straight-through gradient: identity inside ``[alpha, beta]``, zero where
    the forward pass clipped."""
    return np.where(in_range_mask(x, qrange), grad, np.zeros((), dtype=grad.dtype))


def range_partial(x, q, qrange: QuantRange) -> np.ndarray:
    """Elementwise dQ/dbeta with the rounded index held fixed.

    In range ``Q = n * s`` and ``s`` is proportional to ``beta``, so the
    derivative is ``Q / beta``.  Above the range it is 1, below it is -1 for
    signed tensors and 0 for unsigned ones.
    """
    beta = qrange.beta
    d = q / beta
    d = np.where(x > beta, np.float32(1.0), d)
    low = np.float32(-1.0) if qrange.signed else np.float32(0.0)
    return np.where(x < qrange.alpha, low, d).astype(np.float32, copy=False)


def range_backward(grad, x, bits, qrange: QuantRange, q=None) -> float:
    """Gradient of the loss w.r.t. ``beta`` given the upstream ``grad``."""
    if q is None:
        q = quantize(x, bits, qrange)
    return float(np.sum(grad * range_partial(x, q, qrange), dtype=np.float64))


class FakeQuant:
    """Fake-quantization block bound to one gate variable.

    ``target`` is ``"weight"`` or ``"activation"``.  The same block is used as
    a standalone layer for activations and is owned by the parameterized layer
    for its weights.
    """

    kind = "fakequant"

    def __init__(self, gate, qrange: QuantRange, target: str):
        self.gate = gate
        self.range = qrange
        self.target = target
        self.params = {"beta": self.range.beta}
        self.grads: dict[str, np.ndarray] = {}
        self.stats: dict[str, np.ndarray] = {}
        self._cache = None

    def __repr__(self):
        return (f"FakeQuant(target={self.target!r}, beta={float(self.range.beta):.4g}, "
                f"signed={self.range.signed}, gate_shape={self.gate.value.shape})")

    @property
    def bits(self) -> np.ndarray:
        return self.gate.bits()

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        q = gated_quantize(x, self.gate.value, self.range)
        self._cache = (x, q)
        return q

    def backward(self, dq):
        if self._cache is None:
            raise RuntimeError("FakeQuant.backward called before forward")
        x, q = self._cache
        dq = np.ascontiguousarray(dq, dtype=np.float32)
        dx = np.empty_like(dq)
        dbeta = _kernels.fq_backward_kernel(
            np.ascontiguousarray(x).reshape(-1), np.ascontiguousarray(q).reshape(-1),
            dq.reshape(-1), float(self.range.beta), self.range.signed, dx.reshape(-1))
        if self.range.learnable:
            self.grads["beta"] = np.array(dbeta, dtype=np.float32)
        else:
            self.grads["beta"] = np.zeros((), dtype=np.float32)
        if self.target == "weight":
            self.stats = {"grad": np.abs(dx), "value": np.abs(x)}
        else:
            self.stats = {"grad": np.abs(dq.sum(axis=0)), "value": np.abs(q.mean(axis=0))}
        return dx
