"""Estimator interface over the network and training loop."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .network import Architecture, count_parameters, load_model, save_model
from .training import BlinkSequence, TrainConfig, predict, train


def _as_batch(X, mask=None):
    """Accept a list of BlinkSequence or an (N, T, 4) array (+ optional mask)."""
    if len(X) and isinstance(X[0], BlinkSequence):
        B = np.stack([s.features for s in X])
        mask = np.stack([s.pad_mask for s in X])
        y = np.array([s.label for s in X], dtype=float)
        return B, mask, y
    B = np.asarray(X, dtype=float)
    if B.ndim != 3 or B.shape[2] != 4:
        raise ValueError(f"expected (N, T, 4) sequences, got shape {B.shape}")
    if not np.all(np.isfinite(B)):
        raise ValueError("sequence features must be finite")
    mask = np.ones(B.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return B, mask, None


def _sequences(B, mask, y):
    return [BlinkSequence(b * m[:, None], m, float(t)) for b, m, t in zip(B, mask, y)]


class HMLSTMRegressor(RegressorMixin, BaseEstimator):
    """Drowsiness score regressor on blink-feature sequences.

    Outputs lie in (0, 10); :meth:`predict_class` maps them onto the three
    drowsiness classes. Parameters mirror :class:`TrainConfig` plus the
    architecture widths.

    Example:
        >>> reg = HMLSTMRegressor(epochs=2).fit(sequences)
        >>> scores = reg.predict(sequences)
    """

    def __init__(
        self,
        learning_rate=0.000053,
        delta=1.253,
        batch_size=64,
        epochs=80,
        l2_lambda=0.1,
        seed=0,
        fc1=32,
        hidden=32,
        n_layers=4,
        head=16,
        fc2=64,
        fc3=32,
        fc4=16,
        boundary="hard",
    ):
        self.learning_rate = learning_rate
        self.delta = delta
        self.batch_size = batch_size
        self.epochs = epochs
        self.l2_lambda = l2_lambda
        self.seed = seed
        self.fc1 = fc1
        self.hidden = hidden
        self.n_layers = n_layers
        self.head = head
        self.fc2 = fc2
        self.fc3 = fc3
        self.fc4 = fc4
        self.boundary = boundary

    def _config(self, T):
        return TrainConfig(self.learning_rate, self.delta, self.batch_size, self.epochs,
                           self.l2_lambda, window=T, stride=1, seed=self.seed)

    def _arch(self, T):
        return Architecture(T, 4, self.fc1, self.hidden, self.n_layers, self.head, self.fc2, self.fc3, self.fc4)

    def fit(self, X, y=None, mask=None):
        """Train on a list of BlinkSequence, or on an (N, T, 4) array with targets ``y``."""
        B, mask, labels = _as_batch(X, mask)
        if labels is None:
            if y is None:
                raise ValueError("targets are required for array input")
            labels = np.asarray(y, dtype=float)
        if len(labels) != len(B):
            raise ValueError("one target per sequence is required")
        T = B.shape[1]
        result = train(_sequences(B, mask, labels), self._config(T), self._arch(T), boundary=self.boundary)
        self.arch_ = result.arch
        self.params_ = result.params
        self.state_ = result.state
        self.loss_trace_ = result.loss_trace
        self.n_features_in_ = 4
        return self

    def predict(self, X, mask=None) -> np.ndarray:
        check_is_fitted(self, "params_")
        B, mask, _ = _as_batch(X, mask)
        if B.shape[1] != self.arch_.T:
            raise ValueError(f"model expects sequences of length {self.arch_.T}, got {B.shape[1]}")
        seqs = _sequences(B, mask, np.zeros(len(B)))
        return predict(self.arch_, self.params_, self.state_, seqs)

    def predict_class(self, X, mask=None) -> np.ndarray:
        from .evaluation import discretize_many

        return discretize_many(self.predict(X, mask))

    def n_parameters(self) -> int:
        check_is_fitted(self, "params_")
        return count_parameters(self.arch_)

    def save(self, dest, extras: Optional[dict] = None, meta: Optional[dict] = None) -> bytes:
        check_is_fitted(self, "params_")
        return save_model(dest, self.arch_, self.params_, self.state_, extras, meta)

    @classmethod
    def load(cls, source) -> "HMLSTMRegressor":
        bundle = load_model(source)
        a = bundle.arch
        reg = cls(fc1=a.fc1, hidden=a.hidden, n_layers=a.n_layers, head=a.head, fc2=a.fc2, fc3=a.fc3, fc4=a.fc4)
        reg.arch_, reg.params_, reg.state_ = a, bundle.params, bundle.state
        reg.extras_, reg.meta_ = bundle.extras, bundle.meta
        reg.n_features_in_ = 4
        return reg
