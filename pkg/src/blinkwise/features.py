"""Blink features and the two normalization stages.

Feature columns are always ordered ``FEATURE_NAMES``: duration (frames),
amplitude (EAR), eye opening velocity (EAR/frame) and frequency (blinks per
100 frames).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .detection import BlinkEvent
from .exceptions import MalformedRowError, PreconditionError, TooFewBlinksError, UnsupportedFormatError
from .landmarks import EarSeries, PathOrFile, _open_text, _write_provenance

FEATURE_NAMES = ("duration", "amplitude", "velocity", "frequency")
FEATURES_VERSION = "# blinkwise-features v1"
CALIBRATION_VERSION = "# blinkwise-calibration v1"
SIGMA_FLOOR = 1e-6
MIN_ALERT_BLINKS = 6


@dataclass(frozen=True)
class BlinkFeatureVector:
    duration: float
    amplitude: float
    velocity: float
    frequency: float
    normalized: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.duration, self.amplitude, self.velocity, self.frequency])

    @classmethod
    def rows(cls, X, normalized: bool = False) -> List["BlinkFeatureVector"]:
        return [cls(*map(float, row), normalized=normalized) for row in np.asarray(X)]


def extract_features(blinks: Sequence[BlinkEvent], series: EarSeries) -> np.ndarray:
    """Raw (n, 4) feature matrix for an ordered list of blinks.

    Frequency of blink ``i`` is ``100 * (i + 1) / (end_i - origin + 1)``,
    counting frames from the stream's first frame.
    """
    if not len(blinks):
        return np.empty((0, 4))
    start = np.array([b.start for b in blinks])
    bottom = np.array([b.bottom for b in blinks])
    end = np.array([b.end for b in blinks])
    if np.any(np.diff(start) < 0):
        raise ValueError("blinks must be ordered by start frame")
    e_start, e_bottom, e_end = (series.values_at(ix) for ix in (start, bottom, end))

    duration = (end - start + 1).astype(float)
    amplitude = (e_start - 2.0 * e_bottom + e_end) / 2.0
    velocity = (e_end - e_bottom) / np.maximum(end - bottom, 1)
    frames_elapsed = end - series.origin + 1
    frequency = 100.0 * np.arange(1, len(blinks) + 1) / frames_elapsed
    return np.column_stack([duration, amplitude, velocity, frequency])


def _floored_std(X, floor, what):
    sd = X.std(axis=0)
    low = sd < floor
    if np.any(low):
        cols = np.flatnonzero(low)
        names = ", ".join(FEATURE_NAMES[i] if X.shape[1] == 4 else str(i) for i in cols)
        warnings.warn(f"{what}: near-constant feature(s) {names}; sigma floored to {floor:g}", RuntimeWarning)
    return np.where(low, floor, sd)


@dataclass
class CalibrationStats:
    mu: np.ndarray
    sigma: np.ndarray
    count_used: int

    def write(self, dest: PathOrFile, provenance: Optional[dict] = None) -> None:
        fh, owned = _open_text(dest, "w")
        try:
            fh.write(CALIBRATION_VERSION + "\n")
            _write_provenance(fh, provenance)
            fh.write("feature,mu,sigma,count_used\n")
            for name, m, s in zip(FEATURE_NAMES, self.mu, self.sigma):
                fh.write(f"{name},{float(m)!r},{float(s)!r},{self.count_used}\n")
        finally:
            if owned:
                fh.close()

    @classmethod
    def read(cls, source: PathOrFile) -> "CalibrationStats":
        fh, owned = _open_text(source)
        try:
            lines = [ln.strip() for ln in fh.read().splitlines()]
        finally:
            if owned:
                fh.close()
        rows = [ln for ln in lines if ln and not ln.startswith("#")]
        if not rows or rows[0] != "feature,mu,sigma,count_used":
            raise UnsupportedFormatError("not a calibration file")
        mu, sigma, count = {}, {}, 0
        for row in rows[1:]:
            name, m, s, c = row.split(",")
            mu[name], sigma[name], count = float(m), float(s), int(c)
        return cls(np.array([mu[n] for n in FEATURE_NAMES]), np.array([sigma[n] for n in FEATURE_NAMES]), count)


class SubjectCalibrator(TransformerMixin, BaseEstimator):
    """Per-subject z-scoring from the first third of the alert-state blinks.

    ``fit`` consumes the first ``n // 3`` rows of the (ordered) alert blinks;
    :meth:`remaining` returns the rows that may still be used downstream.
    """

    def __init__(self, sigma_floor=SIGMA_FLOOR, min_blinks=MIN_ALERT_BLINKS):
        self.sigma_floor = sigma_floor
        self.min_blinks = min_blinks

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 4:
            raise ValueError(f"expected an (n, 4) feature matrix, got shape {X.shape}")
        if len(X) < self.min_blinks:
            raise TooFewBlinksError(f"{len(X)} alert blinks; at least {self.min_blinks} needed to calibrate")
        k = len(X) // 3
        calib = X[:k]
        self.mean_ = calib.mean(axis=0)
        self.scale_ = _floored_std(calib, self.sigma_floor, "calibration")
        self.n_calibration_ = k
        self.n_features_in_ = 4
        return self

    def remaining(self, X_alert):
        check_is_fitted(self, "mean_")
        return np.asarray(X_alert)[self.n_calibration_:]

    def transform(self, X):
        check_is_fitted(self, "mean_")
        return (np.asarray(X, dtype=float) - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return np.asarray(X, dtype=float) * self.scale_ + self.mean_

    @property
    def stats_(self) -> CalibrationStats:
        check_is_fitted(self, "mean_")
        return CalibrationStats(self.mean_.copy(), self.scale_.copy(), self.n_calibration_)

    @classmethod
    def from_stats(cls, stats: CalibrationStats) -> "SubjectCalibrator":
        cal = cls()
        cal.mean_, cal.scale_, cal.n_calibration_ = np.asarray(stats.mu), np.asarray(stats.sigma), stats.count_used
        cal.n_features_in_ = 4
        return cal


class GlobalStandardizer(TransformerMixin, BaseEstimator):
    """Cross-subject standardization fitted on training blinks only."""

    def __init__(self, sigma_floor=SIGMA_FLOOR):
        self.sigma_floor = sigma_floor

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or len(X) == 0:
            raise PreconditionError("cannot fit global statistics on an empty training set")
        self.mean_ = X.mean(axis=0)
        self.scale_ = _floored_std(X, self.sigma_floor, "global standardization")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        return (np.asarray(X, dtype=float) - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return np.asarray(X, dtype=float) * self.scale_ + self.mean_


# ---------------------------------------------------------------------------
# feature files


@dataclass
class FeatureTable:
    values: np.ndarray
    blink_idx: np.ndarray
    normalized: bool = False


def write_features(
    X,
    dest: PathOrFile,
    normalized: bool = False,
    blink_idx=None,
    provenance: Optional[dict] = None,
) -> None:
    X = np.asarray(X, dtype=float).reshape(-1, 4)
    idx = np.arange(len(X)) if blink_idx is None else np.asarray(blink_idx)
    fh, owned = _open_text(dest, "w")
    try:
        fh.write(FEATURES_VERSION + "\n")
        _write_provenance(fh, provenance)
        fh.write("blink_idx," + ",".join(FEATURE_NAMES) + ",normalized\n")
        flag = int(bool(normalized))
        for i, row in zip(idx, X):
            fh.write(f"{int(i)}," + ",".join(repr(float(v)) for v in row) + f",{flag}\n")
    finally:
        if owned:
            fh.close()


def read_features(source: PathOrFile) -> FeatureTable:
    fh, owned = _open_text(source)
    try:
        lines = fh.read().splitlines()
    finally:
        if owned:
            fh.close()
    if not lines or lines[0].strip() != FEATURES_VERSION:
        raise UnsupportedFormatError("not a blink feature file")
    header = "blink_idx," + ",".join(FEATURE_NAMES) + ",normalized"
    rows, idx, flags = [], [], set()
    header_seen = False
    for number, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if not header_seen:
            if line != header:
                raise MalformedRowError(number, "bad feature header")
            header_seen = True
            continue
        tok = line.split(",")
        if len(tok) != 6:
            raise MalformedRowError(number, f"expected 6 columns, got {len(tok)}")
        try:
            idx.append(int(tok[0]))
            rows.append([float(t) for t in tok[1:5]])
            flags.add(int(tok[5]))
        except ValueError as exc:
            raise MalformedRowError(number, str(exc)) from None
    if len(flags) > 1:
        raise UnsupportedFormatError("mixed normalized flags in one feature file")
    values = np.asarray(rows, dtype=float).reshape(-1, 4)
    return FeatureTable(values, np.asarray(idx, dtype=np.int64), bool(flags.pop()) if flags else False)
