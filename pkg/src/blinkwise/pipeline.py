"""Post-landmark inference: EAR stream to per-sequence drowsiness scores."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .detection import BlinkDetector
from .features import MIN_ALERT_BLINKS, GlobalStandardizer, SubjectCalibrator, extract_features
from .landmarks import EarSeries
from .network import ModelBundle
from .training import make_sequences, predict


def standardizer_from(bundle: ModelBundle) -> Optional[GlobalStandardizer]:
    """The global standardization stored with a model, if any."""
    if "global.mean" not in bundle.extras:
        return None
    std = GlobalStandardizer()
    std.mean_, std.scale_ = bundle.extras["global.mean"], bundle.extras["global.scale"]
    std.n_features_in_ = 4
    return std


def score_stream(
    series: EarSeries,
    bundle: ModelBundle,
    detector: Optional[BlinkDetector] = None,
    calibrator: Optional[SubjectCalibrator] = None,
) -> np.ndarray:
    """Scores for every blink window of one stream.

    Without a ``calibrator`` the stream calibrates itself from its first
    blinks when it has enough of them; shorter streams pass through raw.
    """
    detector = detector if detector is not None else BlinkDetector()
    X = extract_features(detector.detect(series), series)
    if not len(X):
        return np.empty(0)
    if calibrator is None and len(X) >= MIN_ALERT_BLINKS:
        calibrator = SubjectCalibrator().fit(X)
        X = X[calibrator.n_calibration_:]
    if calibrator is not None:
        X = calibrator.transform(X)
    std = standardizer_from(bundle)
    if std is not None:
        X = std.transform(X)
    seqs = make_sequences(X, 0.0, bundle.arch.T, 1)
    return predict(bundle.arch, bundle.params, bundle.state, seqs)


@dataclass
class ThroughputReport:
    frames: int
    seconds: List[float]

    @property
    def fps(self) -> np.ndarray:
        s = np.asarray(self.seconds, dtype=float)
        if self.frames == 0 or not len(s):
            return np.zeros(len(s))
        return self.frames / np.maximum(s, 1e-12)

    def to_kv(self) -> str:
        fps = self.fps
        mean = float(fps.mean()) if len(fps) else 0.0
        sd = float(fps.std()) if len(fps) else 0.0
        return (f"frames={self.frames}\nrepeats={len(self.seconds)}\n"
                f"fps_mean={mean:.1f}\nfps_std={sd:.1f}\nfps_var={sd * sd:.1f}\n")


def measure_throughput(series: EarSeries, bundle: ModelBundle, repeats: int = 3, detector=None) -> ThroughputReport:
    """Wall-clock frames per second of detection, features and model scoring."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    seconds = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        if len(series):
            score_stream(series, bundle, detector)
        seconds.append(time.perf_counter() - t0)
    return ThroughputReport(len(series), seconds)
