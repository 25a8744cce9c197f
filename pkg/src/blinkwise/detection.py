"""Blink detection: per-frame open/closed labelling, candidate grouping and
the extremum-based retrieval that splits a candidate into individual blinks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.linear_model import LogisticRegression
from sklearn.utils.validation import check_is_fitted

from .exceptions import MalformedRowError, UnsupportedFormatError
from .landmarks import EarSeries, PathOrFile, _open_text, _write_provenance

WINDOW = 13
BLINKS_VERSION = "# blinkwise-blinks v1"
BLINK_COLUMNS = ["start", "bottom", "end", "ear_start", "ear_bottom", "ear_end"]


@dataclass(frozen=True)
class BlinkEvent:
    start: int
    bottom: int
    end: int
    ear_start: float = float("nan")
    ear_bottom: float = float("nan")
    ear_end: float = float("nan")

    def __post_init__(self):
        if not self.start <= self.bottom <= self.end:
            raise ValueError(f"blink frames out of order: {self.start}, {self.bottom}, {self.end}")


@dataclass
class CandidateSegment:
    x: np.ndarray
    first_frame: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)

    def __len__(self):
        return len(self.x)


def frame_windows(ear) -> np.ndarray:
    """(n, 13) matrix of EAR windows centred on each frame, edge-replicated."""
    ear = np.asarray(ear, dtype=float)
    half = WINDOW // 2
    return sliding_window_view(np.pad(ear, half, mode="edge"), WINDOW)


class ClosedFrameClassifier(ClassifierMixin, BaseEstimator):
    """Open/closed decision for the centre frame of a 13-frame EAR window.

    ``kind="threshold"`` labels a frame closed when its EAR is below
    ``threshold``. ``kind="linear13"`` uses a linear score ``w . window + b``
    (closed when positive); weights are either given or learned by
    logistic regression in :meth:`fit`.
    """

    def __init__(self, kind="threshold", threshold=0.2, weights=None, bias=0.0, C=1.0):
        self.kind = kind
        self.threshold = threshold
        self.weights = weights
        self.bias = bias
        self.C = C

    def _check_kind(self):
        if self.kind not in ("threshold", "linear13"):
            raise ValueError(f"unknown classifier kind {self.kind!r}")

    def fit(self, X, y):
        self._check_kind()
        X = np.asarray(X, dtype=float)
        y = np.asarray(y).astype(bool)
        if X.ndim != 2 or X.shape[1] != WINDOW:
            raise ValueError(f"expected (n, {WINDOW}) windows, got {X.shape}")
        self.classes_ = np.array([False, True])
        if self.kind == "linear13":
            lr = LogisticRegression(C=self.C).fit(X, y)
            self.coef_ = lr.coef_.ravel().copy()
            self.intercept_ = float(lr.intercept_[0])
        return self

    def _linear_params(self):
        if hasattr(self, "coef_"):
            return self.coef_, self.intercept_
        if self.weights is None:
            check_is_fitted(self, "coef_")
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (WINDOW,) or not np.all(np.isfinite(w)):
            raise ValueError("linear13 weights must be 13 finite values")
        return w, float(self.bias)

    def decision_function(self, X) -> np.ndarray:
        self._check_kind()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == "threshold":
            return self.threshold - X[:, WINDOW // 2]
        w, b = self._linear_params()
        return X @ w + b

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X) > 0


def classify_frames(series, clf: Optional[ClosedFrameClassifier] = None) -> np.ndarray:
    """Boolean closed-eye label per frame."""
    ear = series.ear if isinstance(series, EarSeries) else np.asarray(series, dtype=float)
    if ear.size == 0:
        raise ValueError("cannot classify an empty series")
    clf = clf if clf is not None else ClosedFrameClassifier()
    if clf.kind == "threshold":
        return ear < clf.threshold
    return clf.predict(frame_windows(ear))


def _closed_runs(labels) -> np.ndarray:
    """(k, 2) array of [lo, hi) bounds of maximal True runs."""
    lab = np.asarray(labels, dtype=np.int8)
    edges = np.diff(np.r_[0, lab, 0])
    return np.column_stack([np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)])


def group_closed_runs(labels, ear=None, first_frame: int = 0) -> List[CandidateSegment]:
    """Maximal runs of closed labels paired with their EAR values."""
    labels = np.asarray(labels, dtype=bool)
    ear = np.zeros(len(labels)) if ear is None else np.asarray(ear, dtype=float)
    return [CandidateSegment(ear[lo:hi], first_frame + lo) for lo, hi in _closed_runs(labels)]


def smooth(x, filter: str = "median", window: int = 3) -> np.ndarray:
    """Median or mean filter with edge replication; output has the input's length."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"filter window must be a positive odd integer, got {window}")
    x = np.asarray(x, dtype=float)
    if window == 1 or x.size == 0:
        return x.copy()
    view = sliding_window_view(np.pad(x, window // 2, mode="edge"), window)
    if filter == "median":
        return np.median(view, axis=1)
    if filter == "mean":
        return view.mean(axis=1)
    raise ValueError(f"unknown filter {filter!r}")


def retrieve_blinks(segment: CandidateSegment, epsilon: float = 0.01, return_work: bool = False):
    """Split one closed-eye candidate into its constituent blinks.

    Extrema of the EAR signal are located from sign changes of the first
    difference (zero differences inherit the sign of their predecessor, a
    leading zero counts as falling). Both endpoints are treated as maxima.
    Extrema are labelled above/below ``0.6*max + 0.4*min``; each pair of
    threshold crossings between consecutive extrema is one blink.

    Returns a list of :class:`BlinkEvent` in global frame numbers, or
    ``(blinks, work)`` with ``work`` the number of array elements produced,
    when ``return_work`` is set.
    """
    x = segment.x
    M = len(x)
    if M < 3:
        return ([], M) if return_work else []

    dx = np.diff(x)
    if dx[0] == 0:
        dx[0] = -epsilon
    # Zero differences take prev * epsilon, applied left to right. Only the
    # sign matters downstream; propagate it explicitly so long flat runs
    # cannot underflow to zero.
    sign = np.sign(dx)
    filled = np.where(sign != 0, np.arange(M - 1), 0)
    np.maximum.accumulate(filled, out=filled)
    sign = sign[filled]

    c = sign[1:] * sign[:-1]
    e = np.r_[0, np.flatnonzero(c < 0) + 1, M - 1]
    thr = 0.6 * x.max() + 0.4 * x.min()
    t = np.where(x[e] > thr, 1, -1)
    t[0] = t[-1] = 1
    z = t[1:] * t[:-1]
    s = np.flatnonzero(z < 0)
    assert len(s) % 2 == 0, "threshold crossings must pair up"

    blinks = []
    for i in range(len(s) // 2):
        lo, hi = s[2 * i], s[2 * i + 1]
        start, bottom, end = e[lo], e[hi], e[hi + 1]
        blinks.append(
            BlinkEvent(
                segment.first_frame + int(start),
                segment.first_frame + int(bottom),
                segment.first_frame + int(end),
                float(x[start]),
                float(x[bottom]),
                float(x[end]),
            )
        )
    if return_work:
        work = len(dx) + len(sign) + len(c) + len(e) + len(t) + len(z) + len(s)
        return blinks, work
    return blinks


def candidate_bounds(labels, context: int = 2) -> List[tuple]:
    """Closed runs widened by ``context`` frames per side; overlapping runs merge."""
    n = len(labels)
    merged: List[list] = []
    for lo, hi in _closed_runs(labels):
        lo, hi = max(int(lo) - context, 0), min(int(hi) + context, n)
        if merged and lo < merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return [tuple(b) for b in merged]


def detect_blinks(
    series: EarSeries,
    clf: Optional[ClosedFrameClassifier] = None,
    filter: str = "median",
    window: int = 3,
    context: int = 2,
    epsilon: float = 0.01,
) -> List[BlinkEvent]:
    """Full detector: classify, group, widen, smooth and retrieve.

    Each contiguous segment of ``series`` is processed independently. Event
    EAR values are read from the unsmoothed series.
    """
    blinks: List[BlinkEvent] = []
    for seg in series.segments():
        labels = classify_frames(seg.ear, clf)
        for lo, hi in candidate_bounds(labels, context):
            cand = CandidateSegment(smooth(seg.ear[lo:hi], filter, window), int(seg.frames[lo]))
            for b in retrieve_blinks(cand, epsilon):
                raw = seg.ear[[b.start - seg.frames[0], b.bottom - seg.frames[0], b.end - seg.frames[0]]]
                blinks.append(BlinkEvent(b.start, b.bottom, b.end, *map(float, raw)))
    blinks.sort(key=lambda b: b.start)
    return blinks


class BlinkDetector(BaseEstimator):
    """Estimator wrapper around :func:`detect_blinks`.

    ``fit`` is only needed for ``classifier="linear13"`` without preset
    weights: it learns the window classifier from per-frame closed labels.
    """

    def __init__(
        self,
        classifier="threshold",
        threshold=0.2,
        weights=None,
        bias=0.0,
        filter="median",
        window=3,
        context=2,
        epsilon=0.01,
    ):
        self.classifier = classifier
        self.threshold = threshold
        self.weights = weights
        self.bias = bias
        self.filter = filter
        self.window = window
        self.context = context
        self.epsilon = epsilon

    def _make_classifier(self):
        return ClosedFrameClassifier(self.classifier, self.threshold, self.weights, self.bias)

    def fit(self, X: Sequence[EarSeries] = (), y=None):
        clf = self._make_classifier()
        if self.classifier == "linear13" and self.weights is None:
            if y is None:
                raise ValueError("linear13 classifier needs per-frame labels to fit")
            windows = np.vstack([frame_windows(s.ear) for s in X])
            clf.fit(windows, np.concatenate([np.asarray(v, dtype=bool) for v in y]))
        self.classifier_ = clf
        return self

    def detect(self, series: EarSeries) -> List[BlinkEvent]:
        clf = getattr(self, "classifier_", None) or self._make_classifier()
        return detect_blinks(series, clf, self.filter, self.window, self.context, self.epsilon)

    def transform(self, X: Sequence[EarSeries]) -> List[List[BlinkEvent]]:
        return [self.detect(s) for s in X]


def write_blinks(blinks: Sequence[BlinkEvent], dest: PathOrFile, provenance: Optional[dict] = None) -> None:
    fh, owned = _open_text(dest, "w")
    try:
        fh.write(BLINKS_VERSION + "\n")
        _write_provenance(fh, provenance)
        fh.write(",".join(BLINK_COLUMNS) + "\n")
        for b in blinks:
            fh.write(f"{b.start},{b.bottom},{b.end},{b.ear_start!r},{b.ear_bottom!r},{b.ear_end!r}\n")
    finally:
        if owned:
            fh.close()


def read_blinks(source: PathOrFile) -> List[BlinkEvent]:
    fh, owned = _open_text(source)
    try:
        lines = fh.read().splitlines()
    finally:
        if owned:
            fh.close()
    if not lines:
        return []
    if lines[0].strip() != BLINKS_VERSION:
        raise UnsupportedFormatError(f"not a blink file: {lines[0]!r}")
    out = []
    header_seen = False
    for number, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if not header_seen:
            if line.split(",") != BLINK_COLUMNS:
                raise MalformedRowError(number, "bad blink header")
            header_seen = True
            continue
        tok = line.split(",")
        if len(tok) != len(BLINK_COLUMNS):
            raise MalformedRowError(number, f"expected {len(BLINK_COLUMNS)} columns, got {len(tok)}")
        try:
            out.append(BlinkEvent(int(tok[0]), int(tok[1]), int(tok[2]), *map(float, tok[3:])))
        except ValueError as exc:
            raise MalformedRowError(number, str(exc)) from None
    return out


__all__ = [
    "BlinkDetector",
    "BlinkEvent",
    "CandidateSegment",
    "ClosedFrameClassifier",
    "candidate_bounds",
    "classify_frames",
    "detect_blinks",
    "frame_windows",
    "group_closed_runs",
    "read_blinks",
    "retrieve_blinks",
    "smooth",
    "write_blinks",
]

