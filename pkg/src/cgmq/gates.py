"""Gate variables and the rules that move them.

A gate value ``g`` selects a bit-width through the step function ``T``.  Gates
receive no loss gradient; instead each mini-batch moves them by
``g <- max(g - lr * dir, 0.5)`` where the direction ``dir`` is positive while
the cost budget is violated and non-positive once it holds.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ._kernels import BIT_LEVELS

GATE_INIT = 5.5
GATE_FLOOR = 0.5
DIRECTION_EPS = 1e-8
DIRECTION_CAP = 1e4

RULES = ("dir1", "dir2", "dir3")
GRANULARITIES = ("layer", "element")
DEFAULT_GATE_LR = {"dir1": 0.01, "dir2": 0.01, "dir3": 0.001}

_T_EDGES = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
_T_VALUES = np.array([0, 2, 4, 8, 16, 32])


class SatState(enum.Enum):
    SAT = "Sat"
    UNSAT = "Unsat"

    @classmethod
    def from_satisfied(cls, satisfied: bool) -> "SatState":
        return cls.SAT if satisfied else cls.UNSAT


def transform_T(g):
    """Bit-width selected by gate value(s) ``g``.

    ``g <= 0 -> 0``, ``(0,1] -> 2``, ``(1,2] -> 4``, ``(2,3] -> 8``,
    ``(3,4] -> 16``, ``g > 4 -> 32``.
    """
    g = np.asarray(g, dtype=np.float64)
    out = _T_VALUES[np.searchsorted(_T_EDGES, g, side="left")]
    return int(out) if out.ndim == 0 else out


def gate_function_G(g, b: int):
    """1 where ``T(g) >= b``, else 0."""
    if b not in BIT_LEVELS:
        raise ValueError(f"b must be one of {BIT_LEVELS}, got {b}")
    out = (np.asarray(transform_T(g)) >= b).astype(np.int64)
    return int(out) if out.ndim == 0 else out


@dataclass
class GateVariable:
    """Gate value(s) for one weight or activation group.

    ``value`` has shape ``()`` for a per-layer gate and the shape of the
    governed tensor (without the batch axis) for per-element gates.
    """

    name: str
    kind: str
    value: np.ndarray

    def __post_init__(self):
        if self.kind not in ("weight", "activation"):
            raise ValueError(f"gate kind must be 'weight' or 'activation', got {self.kind!r}")
        self.value = np.asarray(self.value, dtype=np.float32)

    @classmethod
    def initial(cls, name, kind, shape=(), init=GATE_INIT):
        return cls(name, kind, np.full(shape, init, dtype=np.float32))

    @property
    def per_element(self) -> bool:
        return self.value.ndim > 0

    def bits(self):
        return transform_T(self.value)

    def histogram(self) -> dict[int, int]:
        bits = np.atleast_1d(self.bits())
        return {b: int(np.count_nonzero(bits == b)) for b in BIT_LEVELS}


@dataclass
class DirectionStats:
    """Per-gate inputs to the direction rules.

    ``grad`` is the absolute batch-mean loss gradient, ``value`` is ``|w|``
    for weights or the absolute batch-mean activation, ``gate`` is ``|g|``.
    """

    grad: np.ndarray
    value: np.ndarray
    gate: np.ndarray

    def reduced(self) -> "DirectionStats":
        """Group-mean statistics for a single shared gate."""
        return DirectionStats(
            np.asarray(np.mean(self.grad, dtype=np.float64)),
            np.asarray(np.mean(self.value, dtype=np.float64)),
            np.asarray(np.abs(self.gate), dtype=np.float64),
        )


def _unsat(denominator):
    return np.minimum(1.0 / (denominator + DIRECTION_EPS), DIRECTION_CAP)


def compute_direction(rule: str, kind: str, state: SatState, stats: DirectionStats):
    """Direction for every gate described by ``stats``.

    Strictly positive under ``Unsat`` and non-positive under ``Sat`` for all
    three rules.  ``kind`` only names the statistic in ``stats.value`` (weight
    magnitude or activation magnitude); the formulas coincide.
    """
    if rule not in RULES:
        raise ValueError(f"unknown direction rule {rule!r}")
    if kind not in ("weight", "activation"):
        raise ValueError(f"unknown gate kind {kind!r}")
    grad = np.asarray(stats.grad, dtype=np.float64)
    value = np.asarray(stats.value, dtype=np.float64)
    gate = np.abs(np.asarray(stats.gate, dtype=np.float64))
    if state is SatState.UNSAT:
        if rule == "dir1":
            return _unsat(grad)
        return _unsat(grad + value)
    if rule == "dir1":
        return -gate
    if rule == "dir2":
        return -(gate + value)
    return -(grad + value)


def update_gates(gate: GateVariable, direction, lr: float) -> None:
    """In-place ``g <- max(g - lr * dir, 0.5)``."""
    if lr <= 0:
        raise ValueError("gate learning rate must be positive")
    g = gate.value.astype(np.float64) - lr * np.asarray(direction, dtype=np.float64)
    gate.value[...] = np.maximum(g, GATE_FLOOR).astype(np.float32)


def gate_stats(fq, granularity: str) -> DirectionStats:
    """Collect direction statistics from a fake-quant block after backward."""
    stats = DirectionStats(fq.stats["grad"], fq.stats["value"], fq.gate.value)
    if granularity == "layer":
        return stats.reduced()
    return stats


def step_gates(quantizers, rule: str, state: SatState, lr: float, granularity: str):
    """Apply one direction update to every gate; returns the directions."""
    dirs = {}
    for fq in quantizers:
        d = compute_direction(rule, fq.gate.kind, state, gate_stats(fq, granularity))
        update_gates(fq.gate, d, lr)
        dirs[fq.gate.name] = d
    return dirs
