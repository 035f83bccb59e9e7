"""Bit-operation (BOP) cost of a fake-quantized network.

Each multiply-accumulate costs ``b_weight * b_activation``.  For a layer the
activation is the *output* activation the weights produce: a dense layer
costs ``sum_i b_a(i) * sum_j b_W(j, i)`` and a convolution sums, over every
output position and channel, the output bit-width times the bit-widths of its
filter.  The final layer emits float logits, so it is charged with the
bit-widths of its quantized *input* activations instead.  Bias additions are
not counted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from ._kernels import BIT_LEVELS
from .gates import SatState
from .quantizer import FakeQuant


class InfeasibleBudget(ValueError):
    """The requested bound is below the all-2-bit floor."""

    def __init__(self, bound_percent, floor_percent):
        super().__init__(f"bound {bound_percent}% is below the achievable floor "
                         f"{floor_percent:.6g}% (all weights and activations at 2 bits)")
        self.bound_percent = bound_percent
        self.floor_percent = floor_percent


@dataclass
class CostReport:
    per_layer: dict[str, int]
    total: int
    total_32: int
    bound_percent: float | None = None
    budget: float | None = None
    satisfied: bool | None = None
    layer_bits: dict[str, dict] = field(default_factory=dict)

    @property
    def rbop(self) -> float:
        return self.total / self.total_32

    @property
    def rbop_percent(self) -> float:
        return 100.0 * self.total / self.total_32

    def attach_bound(self, bound_percent) -> "CostReport":
        """Set the absolute budget from a bound in percent of the 32-bit cost
        and evaluate ``total <= budget`` exactly."""
        bound = Fraction(str(bound_percent))
        self.bound_percent = float(bound_percent)
        self.budget = float(bound / 100 * self.total_32)
        self.satisfied = bool(self.total * 100 <= bound * self.total_32)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rbop_percent"] = self.rbop_percent
        return d


def _bits_array(bits, shape, what):
    arr = np.asarray(bits)
    if not np.isin(arr, BIT_LEVELS).all():
        bad = np.setdiff1d(np.unique(arr), BIT_LEVELS).tolist()
        raise ValueError(f"{what} bit-widths must be in {BIT_LEVELS}, got {bad}")
    return np.broadcast_to(arr.astype(np.int64), shape)


def layer_bop(layer, weight_bits, act_bits, charge: str = "output") -> int:
    """BOP of one layer.  ``charge="output"`` uses output activation bits,
    ``"input"`` charges each MAC with the bit-width of the input it reads
    (dense layers only).  Layers without weights cost nothing."""
    kind = getattr(layer, "kind", None)
    if kind not in ("dense", "conv2d"):
        return 0
    wb = _bits_array(weight_bits, layer.params["weight"].shape, "weight")
    if kind == "dense":
        if charge == "output":
            ab = _bits_array(act_bits, (layer.out_features,), "activation")
            return int(ab @ wb.sum(axis=0))
        if charge == "input":
            ab = _bits_array(act_bits, (layer.in_features,), "activation")
            return int(ab @ wb.sum(axis=1))
        raise ValueError(f"unknown charge {charge!r}")
    if charge != "output":
        raise ValueError("input charging is only defined for dense layers")
    ab = _bits_array(act_bits, (layer.out_channels, layer.out_size, layer.out_size), "activation")
    return int(np.dot(ab.sum(axis=(1, 2)), wb.sum(axis=(1, 2, 3))))


def cost_sites(net):
    """``(layer, weight quantizer, activation quantizer, charge)`` for every
    parameterized layer of a quantized network."""
    sites = []
    last_act = None
    params = net.parameterized()
    acts = {l.name: l for l in net.layers if isinstance(l, FakeQuant)}
    for layer in net.layers:
        if isinstance(layer, FakeQuant):
            last_act = layer
            continue
        if layer in params:
            if layer is params[-1]:
                if last_act is None:
                    raise ValueError("final layer has no quantized input activation")
                sites.append((layer, layer.weight_quant, last_act, "input"))
            else:
                sites.append((layer, layer.weight_quant, acts[f"{layer.name}.aq"], "output"))
    return sites


def _total(sites, bits_for):
    per_layer = {}
    for layer, wq, aq, charge in sites:
        per_layer[layer.name] = layer_bop(layer, bits_for(wq), bits_for(aq), charge)
    return per_layer


def network_bop(net, bound_percent=None) -> CostReport:
    """Resolve every gate through ``T`` and sum layer costs."""
    sites = cost_sites(net)
    per_layer = _total(sites, lambda fq: fq.gate.bits())
    total = sum(per_layer.values())
    total_32 = sum(_total(sites, lambda fq: 32).values())
    layer_bits = {}
    for layer, wq, aq, _ in sites:
        layer_bits[layer.name] = {"weights": wq.gate.histogram(), "activations": aq.gate.histogram()}
    report = CostReport(per_layer, total, total_32, layer_bits=layer_bits)
    if bound_percent is not None:
        report.attach_bound(bound_percent)
    return report


def floor_report(net) -> CostReport:
    """Cost with every weight and activation at 2 bits."""
    sites = cost_sites(net)
    per_layer = _total(sites, lambda fq: 2)
    total_32 = sum(_total(sites, lambda fq: 32).values())
    return CostReport(per_layer, sum(per_layer.values()), total_32)


def floor_percent(net) -> float:
    return floor_report(net).rbop_percent


def check_feasible(net, bound_percent) -> None:
    rep = floor_report(net)
    if Fraction(str(bound_percent)) * rep.total_32 < rep.total * 100:
        raise InfeasibleBudget(bound_percent, rep.rbop_percent)


def check_budget(report: CostReport) -> SatState:
    """Sat iff the total is within budget (inclusive)."""
    if report.satisfied is None:
        raise ValueError("cost report has no bound attached")
    return SatState.from_satisfied(report.satisfied)
