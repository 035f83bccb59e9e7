"""Constraint-guided mixed-precision quantization-aware training."""

from .bop import CostReport, InfeasibleBudget, network_bop
from .estimator import CGMQClassifier
from .gates import SatState, transform_T
from .pipeline import TrainConfig, preset, run
from .quantizer import QuantRange, gated_quantize, quantize

__all__ = [
    "CGMQClassifier", "CostReport", "InfeasibleBudget", "QuantRange", "SatState", "TrainConfig",
    "gated_quantize", "network_bop", "preset", "quantize", "run", "transform_T",
]
__version__ = "0.1.0"
