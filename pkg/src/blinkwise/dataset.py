"""Dataset manifests and per-video feature loading.

A manifest is a CSV with header ``subject_id,video_id,label,path,fold``;
``label`` is 0 (alert), 5 (low vigilant) or 10 (drowsy). ``path`` may point
at a feature file, an EAR file or a landmark file; relative paths resolve
against the manifest's directory.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import (
    FoldAssignmentError,
    IncompleteSubjectError,
    MalformedRowError,
    UnsupportedFormatError,
)
from .features import FEATURES_VERSION, SubjectCalibrator, extract_features, read_features
from .landmarks import _write_provenance, load_stream, read_text

MANIFEST_COLUMNS = ["subject_id", "video_id", "label", "path", "fold"]
VALID_LABELS = (0, 5, 10)


@dataclass
class VideoRecord:
    subject_id: str
    video_id: str
    label: int
    path: str
    fold: int

    def as_row(self) -> str:
        return f"{self.subject_id},{self.video_id},{self.label},{self.path},{self.fold}"


def write_manifest(records: Sequence[VideoRecord], dest, provenance: Optional[dict] = None) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        _write_provenance(fh, provenance)
        fh.write(",".join(MANIFEST_COLUMNS) + "\n")
        for r in records:
            fh.write(r.as_row() + "\n")


def read_manifest(source) -> List[VideoRecord]:
    """Parse a manifest; relative paths are made absolute against its folder."""
    base = Path(source).resolve().parent
    lines = read_text(source).splitlines()
    records = []
    header_seen = False
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = [t.strip() for t in line.split(",")]
        if not header_seen:
            if tok != MANIFEST_COLUMNS:
                raise MalformedRowError(number, f"manifest header must be {','.join(MANIFEST_COLUMNS)}")
            header_seen = True
            continue
        if len(tok) != 5:
            raise MalformedRowError(number, f"expected 5 columns, got {len(tok)}")
        try:
            label, fold = int(tok[2]), int(tok[4])
        except ValueError as exc:
            raise MalformedRowError(number, str(exc)) from None
        if label not in VALID_LABELS:
            raise MalformedRowError(number, f"label must be one of 0, 5, 10, got {label}")
        path = Path(tok[3])
        if tok[3] and not path.is_absolute():
            path = base / path
        records.append(VideoRecord(tok[0], tok[1], label, str(path) if tok[3] else "", fold))
    if not header_seen:
        raise UnsupportedFormatError("empty manifest")
    ids = [r.video_id for r in records]
    if len(set(ids)) != len(ids):
        raise UnsupportedFormatError("duplicate video_id in manifest")
    return records


def check_protocol(records: Sequence[VideoRecord]) -> Dict[str, int]:
    """Validate subject completeness and fold disjointness; return subject -> fold.

    Raises:
        IncompleteSubjectError: a subject lacks one of the three labels.
        FoldAssignmentError: a subject's videos span more than one fold.
    """
    labels, folds = defaultdict(set), defaultdict(set)
    for r in records:
        labels[r.subject_id].add(r.label)
        folds[r.subject_id].add(r.fold)
    for sid in labels:
        missing = set(VALID_LABELS) - labels[sid]
        if missing:
            raise IncompleteSubjectError(f"subject {sid} lacks videos with label(s) {sorted(missing)}")
        if len(folds[sid]) > 1:
            raise FoldAssignmentError(f"subject {sid} appears in folds {sorted(folds[sid])}")
    return {sid: next(iter(f)) for sid, f in folds.items()}


def load_video_features(path, detector=None) -> Tuple[np.ndarray, bool]:
    """Feature matrix of one video and whether it is already normalized.

    Feature files are read directly; EAR and landmark files are run through
    the blink detector first.
    """
    from .detection import BlinkDetector

    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first == FEATURES_VERSION:
        table = read_features(path)
        return table.values, table.normalized
    series = load_stream(path)
    detector = detector if detector is not None else BlinkDetector()
    return extract_features(detector.detect(series), series), False


@dataclass
class PreparedVideo:
    """A video's subject-normalized features with the source index of each blink."""

    record: VideoRecord
    features: np.ndarray
    blink_ids: np.ndarray


def prepare_videos(
    records: Sequence[VideoRecord],
    detector=None,
    features: Optional[Dict[str, np.ndarray]] = None,
) -> List[PreparedVideo]:
    """Load and per-subject calibrate every video.

    The calibration statistics come from the first third of the subject's
    alert blinks; those blinks are dropped from the alert video. Videos whose
    feature files are flagged as normalized are taken as they are.
    ``features`` may supply raw matrices by video id instead of reading files.
    """
    check_protocol(records)
    raw, flags = {}, {}
    for r in records:
        if features is not None and r.video_id in features:
            raw[r.video_id], flags[r.video_id] = np.asarray(features[r.video_id], dtype=float), False
        else:
            raw[r.video_id], flags[r.video_id] = load_video_features(r.path, detector)

    by_subject = defaultdict(list)
    for r in records:
        by_subject[r.subject_id].append(r)
    out = []
    for sid, recs in by_subject.items():
        if all(flags[r.video_id] for r in recs):
            for r in recs:
                X = raw[r.video_id]
                out.append(PreparedVideo(r, X, np.arange(len(X))))
            continue
        alert = [r for r in recs if r.label == 0]
        X_alert = np.concatenate([raw[r.video_id] for r in alert])
        cal = SubjectCalibrator().fit(X_alert)
        consumed = cal.n_calibration_
        for r in recs:
            X = raw[r.video_id]
            ids = np.arange(len(X))
            if r.label == 0 and consumed:
                take = min(consumed, len(X))
                X, ids = X[take:], ids[take:]
                consumed -= take
            out.append(PreparedVideo(r, cal.transform(X), ids))
    order = {r.video_id: i for i, r in enumerate(records)}
    out.sort(key=lambda v: order[v.record.video_id])
    return out
