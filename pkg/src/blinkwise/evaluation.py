"""Discretization, voting, the sequence/video metrics and cross-validation."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import PreparedVideo, VideoRecord, check_protocol, prepare_videos
from .exceptions import PreconditionError
from .features import GlobalStandardizer
from .network import Architecture
from .training import TrainConfig, TrainResult, make_sequences, predict, train

LOW_BORDER = 3.3
HIGH_BORDER = 6.6
METRIC_KEYS = ("BSRE", "VRE", "BSA", "VA")

# Published cross-validation averages kept for side-by-side reports.
REFERENCE_RESULTS = {
    "HM-LSTM network": {"BSRE": 1.90, "VRE": 1.14, "BSA": 0.54, "VA": 0.652},
    "LSTM network": {"BSRE": 3.42, "VRE": 2.68, "BSA": 0.528, "VA": 0.614},
    "Fully connected layers": {"BSRE": 2.85, "VRE": 2.17, "BSA": 0.52, "VA": 0.57},
    "Human judgment": {"BSRE": None, "VRE": 2.01, "BSA": None, "VA": 0.578},
}
REFERENCE_FOLDS = {
    "PM": {"VA": (0.64, 0.61, 0.70, 0.64, 0.67), "VRE": (2.42, 1.04, 0.58, 0.85, 0.81)},
    "HJ": {"VA": (0.62, 0.59, 0.60, 0.53, 0.55), "VRE": (1.37, 2.3, 1.96, 2.32, 2.07)},
}


class ClassLabel(IntEnum):
    ALERT = 0
    LOW_VIGILANT = 1
    DROWSY = 2

    @property
    def score(self) -> int:
        return 5 * int(self)

    @classmethod
    def from_score(cls, label) -> "ClassLabel":
        """Map a video label (0, 5 or 10) to its class; class members pass through."""
        if isinstance(label, ClassLabel):
            return label
        value = float(label)
        if value not in (0.0, 5.0, 10.0):
            raise ValueError(f"video labels are 0, 5 or 10, got {label}")
        return cls(int(value) // 5)


def _as_classes(labels) -> np.ndarray:
    return np.array([int(ClassLabel.from_score(v)) for v in labels], dtype=int)


def discretize(out: float) -> ClassLabel:
    """[0, 3.3) alert, [3.3, 6.6] low vigilant, (6.6, 10] drowsy."""
    if not 0.0 <= out <= 10.0:
        raise ValueError(f"score {out} outside [0, 10]")
    if out < LOW_BORDER:
        return ClassLabel.ALERT
    if out <= HIGH_BORDER:
        return ClassLabel.LOW_VIGILANT
    return ClassLabel.DROWSY


def discretize_many(outs) -> np.ndarray:
    outs = np.asarray(outs, dtype=float)
    if np.any((outs < 0) | (outs > 10)) or not np.all(np.isfinite(outs)):
        raise ValueError("scores must lie in [0, 10]")
    return np.where(outs < LOW_BORDER, 0, np.where(outs <= HIGH_BORDER, 1, 2))


def vote(classes) -> ClassLabel:
    """Most frequent class; ties go to the drowsier class."""
    classes = [int(c) for c in classes]
    if not classes:
        raise ValueError("cannot vote on an empty list")
    counts = np.bincount(classes, minlength=3)
    return ClassLabel(int(np.flatnonzero(counts == counts.max())[-1]))


def nearest_border(out: float, true_class) -> float:
    true_class = ClassLabel(int(true_class))
    if true_class == ClassLabel.ALERT:
        return LOW_BORDER
    if true_class == ClassLabel.DROWSY:
        return HIGH_BORDER
    return LOW_BORDER if abs(out - LOW_BORDER) <= abs(out - HIGH_BORDER) else HIGH_BORDER


def _border_errors(outs, true_classes) -> Tuple[np.ndarray, np.ndarray]:
    outs = np.asarray(outs, dtype=float)
    wrong = discretize_many(outs) != true_classes
    S = np.where(
        true_classes == 0,
        LOW_BORDER,
        np.where(true_classes == 2, HIGH_BORDER,
                 np.where(np.abs(outs - LOW_BORDER) <= np.abs(outs - HIGH_BORDER), LOW_BORDER, HIGH_BORDER)),
    )
    return wrong, np.where(wrong, (outs - S) ** 2, 0.0)


def bsre(outs, labels) -> float:
    """Mean squared distance to the true class border over misclassified sequences."""
    outs, cls = np.asarray(outs, dtype=float), _as_classes(labels)
    if len(outs) != len(cls) or len(outs) == 0:
        raise ValueError("outputs and labels must be non-empty and aligned")
    return float(_border_errors(outs, cls)[1].mean())


def bsa(outs, labels) -> float:
    outs, cls = np.asarray(outs, dtype=float), _as_classes(labels)
    if len(outs) != len(cls) or len(outs) == 0:
        raise ValueError("outputs and labels must be non-empty and aligned")
    return float(np.mean(discretize_many(outs) == cls))


@dataclass
class VideoPrediction:
    video_id: str
    outs: np.ndarray
    classes: np.ndarray = field(init=False)
    voted_class: ClassLabel = field(init=False)
    mean_out: float = field(init=False)

    def __post_init__(self):
        self.outs = np.asarray(self.outs, dtype=float)
        self.classes = discretize_many(self.outs)
        self.voted_class = vote(self.classes)
        self.mean_out = float(self.outs.mean())


def vre_va(predictions: Sequence[VideoPrediction], labels) -> Tuple[float, float]:
    """Video regression error and video accuracy.

    Only misclassified videos contribute to VRE, with the border taken
    relative to the video's mean output.
    """
    cls = _as_classes(labels)
    if len(predictions) != len(cls) or len(cls) == 0:
        raise ValueError("predictions and labels must be non-empty and aligned")
    voted = np.array([int(p.voted_class) for p in predictions])
    means = np.array([p.mean_out for p in predictions])
    wrong = voted != cls
    S = np.array([nearest_border(m, c) for m, c in zip(means, cls)])
    vre = float(np.sum(np.where(wrong, (means - S) ** 2, 0.0)) / len(cls))
    return vre, float(np.mean(~wrong))


def confusion_matrix(true_classes, predicted_classes) -> np.ndarray:
    """3x3 counts, rows are true classes."""
    cm = np.zeros((3, 3), dtype=np.int64)
    np.add.at(cm, (np.asarray(true_classes, dtype=int), np.asarray(predicted_classes, dtype=int)), 1)
    return cm


def normalize_rows(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=float)
    totals = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, totals, out=np.zeros_like(cm), where=totals > 0)


@dataclass
class MetricReport:
    BSRE: float
    VRE: float
    BSA: float
    VA: float
    confusion: np.ndarray
    n_sequences: int
    n_videos: int
    name: str = "report"

    @classmethod
    def from_predictions(cls, seq_outs, seq_labels, videos: Sequence[VideoPrediction], video_labels, name="report"):
        vre, va = vre_va(videos, video_labels)
        cm = confusion_matrix(_as_classes(video_labels), [int(v.voted_class) for v in videos])
        return cls(bsre(seq_outs, seq_labels), vre, bsa(seq_outs, seq_labels), va, cm,
                   len(seq_outs), len(videos), name)

    @classmethod
    def average(cls, reports: Sequence["MetricReport"], name="average") -> "MetricReport":
        """Arithmetic mean of the four metrics; confusion counts are summed."""
        if not reports:
            raise ValueError("nothing to average")
        mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_KEYS}
        cm = np.sum([r.confusion for r in reports], axis=0)
        return cls(confusion=cm, n_sequences=sum(r.n_sequences for r in reports),
                   n_videos=sum(r.n_videos for r in reports), name=name, **mean)

    def to_kv(self) -> str:
        lines = [f"name={self.name}"]
        lines += [f"{k}={getattr(self, k)!r}" for k in METRIC_KEYS]
        lines += [f"n_sequences={self.n_sequences}", f"n_videos={self.n_videos}"]
        lines.append("confusion=" + ";".join(",".join(str(int(v)) for v in row) for row in self.confusion))
        lines.append("confusion_rows=" + ";".join(",".join(f"{v:.6f}" for v in row)
                                                  for row in normalize_rows(self.confusion)))
        return "\n".join(lines) + "\n"


def render_table(reports: Sequence[MetricReport], references: bool = True) -> str:
    """Fixed-width table with BSRE, VRE, BSA and VA columns."""
    rows = [(r.name, r.BSRE, r.VRE, r.BSA, r.VA) for r in reports]
    if references:
        rows += [(f"ref: {k}", *(v[m] for m in METRIC_KEYS)) for k, v in REFERENCE_RESULTS.items()]
    width = max(len(r[0]) for r in rows) + 2

    def cell(v, pct):
        if v is None:
            return "|".rjust(8)
        return f"{100 * v:7.1f}%" if pct else f"{v:8.3f}"

    out = ["Model".ljust(width) + "    BSRE     VRE      BSA      VA"]
    for name, *vals in rows:
        out.append(name.ljust(width) + "".join(cell(v, i >= 2) for i, v in enumerate(vals)))
    return "\n".join(out) + "\n"


def render_confusion(cm) -> str:
    names = ("alert", "low_vigilant", "drowsy")
    frac = normalize_rows(cm)
    lines = ["true\\pred".ljust(14) + "".join(n.rjust(14) for n in names)]
    for i, n in enumerate(names):
        lines.append(n.ljust(14) + "".join(f"{int(cm[i, j]):6d} ({frac[i, j]:5.2f})".rjust(14) for j in range(3)))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# fold protocol


def sequences_for(videos: Sequence[PreparedVideo], standardizer: GlobalStandardizer, config: TrainConfig):
    seqs = []
    for v in videos:
        X = standardizer.transform(v.features)
        seqs.extend(make_sequences(X, v.record.label, config.window, config.stride,
                                   v.record.video_id, v.record.subject_id, v.blink_ids))
    return seqs


def fit_fold(train_videos: Sequence[PreparedVideo], config: TrainConfig, arch=None, boundary="hard"):
    """Global standardization on the training videos, then training."""
    if not train_videos:
        raise PreconditionError("no training videos")
    standardizer = GlobalStandardizer().fit(np.concatenate([v.features for v in train_videos]))
    seqs = sequences_for(train_videos, standardizer, config)
    arch = arch or Architecture(T=config.window)
    return standardizer, train(seqs, config, arch, boundary=boundary)


def evaluate_videos(test_videos, standardizer, result: TrainResult, config: TrainConfig, name="report"):
    seqs = sequences_for(test_videos, standardizer, config)
    outs = predict(result.arch, result.params, result.state, seqs)
    by_video = defaultdict(list)
    for s, o in zip(seqs, outs):
        by_video[s.video_id].append(o)
    videos = [VideoPrediction(v.record.video_id, by_video[v.record.video_id]) for v in test_videos]
    report = MetricReport.from_predictions(
        outs, [s.label for s in seqs], videos, [v.record.label for v in test_videos], name
    )
    return report, videos


@dataclass
class CrossValidation:
    folds: List[MetricReport]
    average: MetricReport
    predictions: Dict[int, List[VideoPrediction]]


def _run_fold(k, train_v, test_v, config, arch, boundary):
    standardizer, result = fit_fold(train_v, config, arch, boundary)
    report, vp = evaluate_videos(test_v, standardizer, result, config, name=f"fold {k}")
    return report, vp


def crossvalidate(
    records: Sequence[VideoRecord],
    config: TrainConfig = TrainConfig(),
    arch: Optional[Architecture] = None,
    detector=None,
    features: Optional[Dict[str, np.ndarray]] = None,
    boundary: str = "hard",
    on_fold: Optional[Callable[[int, MetricReport], None]] = None,
    jobs: int = 1,
) -> CrossValidation:
    """Leave-one-fold-out training and evaluation over the manifest's folds.

    Folds are independent; with ``jobs > 1`` they run in worker processes.
    Results do not depend on ``jobs``.
    """
    check_protocol(records)
    fold_ids = sorted({r.fold for r in records})
    if len(fold_ids) < 2:
        raise PreconditionError("cross-validation needs at least two folds")
    videos = prepare_videos(records, detector, features)
    tasks = [
        (k, [v for v in videos if v.record.fold != k], [v for v in videos if v.record.fold == k], config, arch, boundary)
        for k in fold_ids
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            futures = [pool.submit(_run_fold, *t) for t in tasks]
            results = [f.result() for f in futures]
    else:
        results = []
        for t in tasks:
            results.append(_run_fold(*t))
            if on_fold is not None:
                on_fold(t[0], results[-1][0])
    reports = [r for r, _ in results]
    preds = {k: vp for k, (_, vp) in zip(fold_ids, results)}
    return CrossValidation(reports, MetricReport.average(reports), preds)
