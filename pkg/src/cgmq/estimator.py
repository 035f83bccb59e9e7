"""scikit-learn style wrapper around the full training pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .bop import network_bop
from .mnist import DataSet, normalize
from .pipeline import PHASES, TrainConfig, predict_logits, run

IMAGE_SHAPE = (1, 28, 28)


def check_images(X) -> np.ndarray:
    """Validate images and return float32 ``(N, 1, 28, 28)`` in ``[-1, 1]``.

    Accepts flat ``(N, 784)``, ``(N, 28, 28)`` or ``(N, 1, 28, 28)`` input.
    Integer arrays are raw 0..255 pixels and get normalized; float arrays
    are taken as already normalized.
    """
    raw = np.asarray(X)
    integer = np.issubdtype(raw.dtype, np.integer)
    X = check_array(raw, allow_nd=True, dtype=None if integer else np.float32,
                    ensure_all_finite=True)
    n = X.shape[0]
    if int(np.prod(X.shape[1:])) != int(np.prod(IMAGE_SHAPE)):
        raise ValueError(f"expected 28x28 single-channel images, got per-sample shape "
                         f"{X.shape[1:]}")
    if integer:
        if X.min() < 0 or X.max() > 255:
            raise ValueError("integer pixel values must lie in 0..255")
        X = normalize(X)
    return np.ascontiguousarray(X.reshape((n,) + IMAGE_SHAPE), dtype=np.float32)


class CGMQClassifier(ClassifierMixin, BaseEstimator):
    """LeNet-5 trained with constraint-guided mixed-precision quantization.

    ``fit`` runs float pre-training, range calibration, range learning and
    the constrained bit-width search; the fitted network satisfies the
    relative BOP ``bound`` (in percent) whenever ``cost_report_.satisfied``.
    Per-epoch accuracies in ``history_`` are measured on the training data.
    """

    def __init__(self, bound=0.40, direction="dir1", granularity="layer", epochs_float=10,
                 epochs_calibrate=1, epochs_ranges=3, epochs_cgmq=15, lr=0.001, gate_lr=None,
                 batch_size=128, seed=42):
        self.bound = bound
        self.direction = direction
        self.granularity = granularity
        self.epochs_float = epochs_float
        self.epochs_calibrate = epochs_calibrate
        self.epochs_ranges = epochs_ranges
        self.epochs_cgmq = epochs_cgmq
        self.lr = lr
        self.gate_lr = gate_lr
        self.batch_size = batch_size
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            epochs_float=self.epochs_float, epochs_calibrate=self.epochs_calibrate,
            epochs_ranges=self.epochs_ranges, epochs_cgmq=self.epochs_cgmq, lr=self.lr,
            gate_lr=self.gate_lr, direction=self.direction, granularity=self.granularity,
            bound=self.bound, batch_size=self.batch_size, seed=self.seed,
            phases=list(PHASES)).validate()

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        check_classification_targets(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must have shape ({X.shape[0]},), got {y.shape}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) > 10:
            raise ValueError(f"at most 10 classes are supported, got {len(self.classes_)}")
        data = DataSet(X, codes.astype(np.int64))
        record = run(self._config(), data, data)
        self.network_ = record.net
        self.history_ = record.epochs
        self.final_report_ = record.final
        self.cost_report_ = network_bop(self.network_, self.bound)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        logits = predict_logits(self.network_, check_images(X))
        return logits[:, :len(self.classes_)]

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
