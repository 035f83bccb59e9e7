"""Initial quantization ranges from trained weights and observed activations.

A tensor whose observed values are all non-negative gets an unsigned range
``[0, beta]`` with ``beta = max``.  Otherwise the range is symmetric,
``[-beta, beta]`` with ``beta = max(|min|, |max|)`` so that neither tail is
clipped systematically.
"""

from __future__ import annotations

import numpy as np

from .quantizer import BETA_FLOOR, FakeQuant, QuantRange

MOMENTUM = 0.1


def range_from_extrema(lo: float, hi: float) -> QuantRange:
    lo, hi = float(lo), float(hi)
    if lo >= 0.0:
        return QuantRange(max(hi, BETA_FLOOR), signed=False)
    return QuantRange(max(abs(lo), abs(hi), BETA_FLOOR), signed=True)


def _apply(fq: FakeQuant, r: QuantRange) -> None:
    # update in place: optimizers and params hold a reference to ``beta``
    fq.range.beta[...] = r.beta
    fq.range.signed = r.signed


def calibrate_weight_ranges(net) -> dict[str, QuantRange]:
    """Per-layer weight ranges from the min and max of each weight tensor."""
    out = {}
    for layer in net.parameterized():
        fq = layer.weight_quant
        if fq is None:
            raise ValueError(f"layer {layer.name!r} has no weight quantizer")
        w = layer.params["weight"]
        r = range_from_extrema(w.min(), w.max())
        _apply(fq, r)
        out[fq.gate.name] = r
    return out


class RunningExtrema:
    """Running mean of per-batch minima and maxima.

    The first batch initializes the estimate; later batches update it as
    ``r <- (1 - momentum) * r + momentum * batch_value``.  ``negative``
    records whether any observed value was below zero.
    """

    def __init__(self, momentum=MOMENTUM):
        self.momentum = momentum
        self.lo = None
        self.hi = None
        self.negative = False
        self.count = 0

    def update(self, x) -> None:
        lo, hi = float(np.min(x)), float(np.max(x))
        self.negative = self.negative or lo < 0.0
        if self.count == 0:
            self.lo, self.hi = lo, hi
        else:
            m = self.momentum
            self.lo = (1.0 - m) * self.lo + m * lo
            self.hi = (1.0 - m) * self.hi + m * hi
        self.count += 1

    def to_range(self) -> QuantRange:
        if self.count == 0:
            raise ValueError("no batches observed")
        if not self.negative:
            return QuantRange(max(self.hi, BETA_FLOOR), signed=False)
        return QuantRange(max(abs(self.lo), abs(self.hi), BETA_FLOOR), signed=True)


def observe_activations(net, x, trackers: dict) -> None:
    """Forward one batch, feeding the input of every activation quantizer to
    its tracker.  Activation quantizers pass values through unchanged so
    uncalibrated ranges cannot distort downstream statistics."""
    for layer in net.layers:
        if isinstance(layer, FakeQuant):
            trackers[layer.gate.name].update(x)
            continue
        x = layer.forward(x)


def calibrate_activation_ranges(net, batch_stream, momentum=MOMENTUM) -> dict[str, QuantRange]:
    """Set activation ranges from a stream of input batches (images or
    ``(images, labels)`` tuples)."""
    acts = [l for l in net.layers if isinstance(l, FakeQuant)]
    if not acts:
        raise ValueError("network has no activation quantizers")
    trackers = {fq.gate.name: RunningExtrema(momentum) for fq in acts}
    for batch in batch_stream:
        x = batch[0] if isinstance(batch, tuple) else batch
        observe_activations(net, x, trackers)
    out = {}
    for fq in acts:
        r = trackers[fq.gate.name].to_range()
        _apply(fq, r)
        out[fq.gate.name] = r
    return out
