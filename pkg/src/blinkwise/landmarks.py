"""Eye landmark / EAR stream ingestion and the eye aspect ratio signal.

Two line-delimited text formats are understood::

    # blinkwise-landmarks v1
    frame,ts_ms,lx1,ly1,...,lx6,ly6,rx1,ry1,...,rx6,ry6

    # blinkwise-ear v1
    frame,ts_ms,ear

Extra ``#`` comment lines after the version line (provenance headers) are
ignored by the reader.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, TextIO, Union

import numpy as np

from .exceptions import DegenerateEyeError, MalformedRowError, UnsupportedFormatError

logger = logging.getLogger(__name__)

LANDMARK_VERSION = "# blinkwise-landmarks v1"
EAR_VERSION = "# blinkwise-ear v1"
MAX_INTERP_GAP = 5

LANDMARK_COLUMNS = (
    ["frame", "ts_ms"]
    + [f"l{ax}{i}" for i in range(1, 7) for ax in "xy"]
    + [f"r{ax}{i}" for i in range(1, 7) for ax in "xy"]
)
EAR_COLUMNS = ["frame", "ts_ms", "ear"]

PathOrFile = Union[str, os.PathLike, TextIO]


def compute_ear(eye) -> float:
    """Eye aspect ratio of six landmarks ordered p1..p6.

    p1/p4 are the eye corners, (p2, p6) and (p3, p5) the vertical pairs.

    Raises:
        DegenerateEyeError: if the corners coincide (zero eye width).
    """
    p = np.asarray(eye, dtype=float)
    if p.shape != (6, 2):
        raise ValueError(f"expected 6 (x, y) points, got shape {p.shape}")
    width = np.hypot(*(p[0] - p[3]))
    if not width > 0:
        raise DegenerateEyeError("eye corners p1 and p4 coincide")
    vertical = np.hypot(*(p[1] - p[5])) + np.hypot(*(p[2] - p[4]))
    return float(vertical / width)


@dataclass(frozen=True)
class LandmarkFrame:
    frame_index: int
    timestamp_ms: float
    left_eye: np.ndarray
    right_eye: np.ndarray

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        for name in ("left_eye", "right_eye"):
            pts = np.asarray(getattr(self, name), dtype=float)
            if pts.shape != (6, 2):
                raise ValueError(f"{name}: expected 6 (x, y) points, got shape {pts.shape}")
            object.__setattr__(self, name, pts)

    @property
    def degenerate(self) -> bool:
        return _eye_width(self.left_eye) == 0 or _eye_width(self.right_eye) == 0


def _eye_width(eye) -> float:
    return float(np.hypot(*(eye[0] - eye[3])))


@dataclass(frozen=True)
class EarSample:
    frame_index: int
    ear: float
    single_eye: bool = False


def frame_ear(frame: LandmarkFrame) -> EarSample:
    """Binocular EAR: the mean of both eyes, or the one usable eye."""
    values = []
    for eye in (frame.left_eye, frame.right_eye):
        try:
            values.append(compute_ear(eye))
        except DegenerateEyeError:
            pass
    if not values:
        raise DegenerateEyeError(f"frame {frame.frame_index}: both eyes degenerate")
    if len(values) == 1:
        logger.debug("frame %d: one degenerate eye, using the other", frame.frame_index)
        return EarSample(frame.frame_index, values[0], single_eye=True)
    return EarSample(frame.frame_index, 0.5 * (values[0] + values[1]))


@dataclass
class ParseReport:
    rows_read: int = 0
    rows_dropped: int = 0
    frames_interpolated: int = 0
    single_eye_frames: int = 0
    segments: int = 0


@dataclass
class EarSeries:
    """Per-frame EAR signal.

    Frames are sorted and gap-repaired; gaps longer than ``MAX_INTERP_GAP``
    frames remain and split the series into independent segments.
    """

    frames: np.ndarray
    ear: np.ndarray
    timestamps_ms: Optional[np.ndarray] = None
    fps: float = 30.0
    report: ParseReport = field(default_factory=ParseReport)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        self.ear = np.asarray(self.ear, dtype=float).reshape(-1)
        if self.timestamps_ms is None:
            self.timestamps_ms = self.frames * (1000.0 / self.fps)
        self.timestamps_ms = np.asarray(self.timestamps_ms, dtype=float).reshape(-1)
        if not (len(self.frames) == len(self.ear) == len(self.timestamps_ms)):
            raise ValueError("frames, ear and timestamps must have equal length")

    def __len__(self):
        return len(self.frames)

    @classmethod
    def from_values(cls, ear, fps: float = 30.0, first_frame: int = 0) -> "EarSeries":
        ear = np.asarray(ear, dtype=float)
        return cls(np.arange(first_frame, first_frame + len(ear)), ear, fps=fps)

    @property
    def samples(self) -> List[EarSample]:
        return [EarSample(int(f), float(e)) for f, e in zip(self.frames, self.ear)]

    @property
    def origin(self) -> int:
        """Frame index of the stream start (0 for empty series)."""
        return int(self.frames[0]) if len(self.frames) else 0

    def segments(self) -> Iterator["EarSeries"]:
        """Yield maximal runs of contiguous frame indices."""
        if not len(self):
            return
        breaks = np.flatnonzero(np.diff(self.frames) != 1) + 1
        for lo, hi in zip(np.r_[0, breaks], np.r_[breaks, len(self)]):
            yield EarSeries(self.frames[lo:hi], self.ear[lo:hi], self.timestamps_ms[lo:hi], self.fps)

    def values_at(self, frame_indices) -> np.ndarray:
        pos = np.searchsorted(self.frames, frame_indices)
        pos = np.clip(pos, 0, max(len(self.frames) - 1, 0))
        if not len(self.frames) or np.any(self.frames[pos] != np.asarray(frame_indices)):
            raise KeyError("requested frames are not present in the series")
        return self.ear[pos]


# ---------------------------------------------------------------------------
# reading


def _open_text(source: PathOrFile, mode="r"):
    if isinstance(source, (str, os.PathLike)):
        return open(source, mode, encoding="utf-8", newline=""), True
    return source, False


def _detect_format(version: Optional[str], header: List[str], line_number: int) -> str:
    if version is not None:
        if version == LANDMARK_VERSION:
            return "landmarks"
        if version == EAR_VERSION:
            return "ear"
        raise UnsupportedFormatError(f"unsupported format version line {version!r}")
    if header == LANDMARK_COLUMNS:
        return "landmarks"
    if header == EAR_COLUMNS:
        return "ear"
    raise UnsupportedFormatError(f"line {line_number}: unrecognised header {','.join(header)!r}")


def _parse_number(token: str, line_number: int, what: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise MalformedRowError(line_number, f"{what}: not a number: {token!r}") from None
    if not np.isfinite(value):
        raise MalformedRowError(line_number, f"{what}: non-finite value {token!r}")
    return value


def _iter_rows(lines: Iterable[str]):
    """Yield (line_number, stripped_text) for non-blank lines."""
    for number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if line:
            yield number, line


def load_stream(source: PathOrFile, format: str = "auto", fps: Optional[float] = None) -> EarSeries:
    """Read a landmark or EAR file into a gap-repaired :class:`EarSeries`.

    Args:
        source: path or open text stream.
        format: ``"auto"``, ``"landmarks"`` or ``"ear"``.
        fps: frame rate; estimated from timestamps when omitted.

    Raises:
        MalformedRowError: wrong column count or unparsable value (line-numbered).
        UnsupportedFormatError: unknown version line, header, or ``format``.
    """
    if format not in ("auto", "landmarks", "ear"):
        raise UnsupportedFormatError(f"unsupported format {format!r}")
    fh, owned = _open_text(source)
    try:
        lines = list(_iter_rows(fh))
    finally:
        if owned:
            fh.close()

    report = ParseReport()
    if not lines:
        return EarSeries(np.empty(0, np.int64), np.empty(0), np.empty(0), fps or 30.0, report)

    idx = 0
    version = None
    if lines[0][1].startswith("#"):
        version = lines[0][1]
        idx = 1
    while idx < len(lines) and lines[idx][1].startswith("#"):
        idx += 1
    if idx == len(lines):
        # version line only: a valid, empty stream
        if version not in (LANDMARK_VERSION, EAR_VERSION):
            raise UnsupportedFormatError(f"unsupported or missing version line {version!r}")
        return EarSeries(np.empty(0, np.int64), np.empty(0), np.empty(0), fps or 30.0, report)

    header_line, header_text = lines[idx]
    header = [h.strip() for h in header_text.split(",")]
    detected = _detect_format(version, header, header_line)
    if format != "auto" and format != detected:
        raise UnsupportedFormatError(f"expected {format} input, found {detected}")
    expected = LANDMARK_COLUMNS if detected == "landmarks" else EAR_COLUMNS
    if header != expected:
        raise MalformedRowError(header_line, f"header does not match {detected} schema")

    frames, stamps, ears = [], [], []
    for number, text in lines[idx + 1:]:
        if text.startswith("#"):
            continue
        tokens = text.split(",")
        if len(tokens) != len(expected):
            raise MalformedRowError(number, f"expected {len(expected)} columns, got {len(tokens)}")
        report.rows_read += 1
        frame = _parse_number(tokens[0], number, "frame")
        if frame < 0 or frame != int(frame):
            raise MalformedRowError(number, f"frame must be a non-negative integer: {tokens[0]!r}")
        ts = _parse_number(tokens[1], number, "ts_ms")
        if ts < 0:
            raise MalformedRowError(number, "ts_ms must be non-negative")
        values = [_parse_number(t, number, col) for t, col in zip(tokens[2:], expected[2:])]
        if detected == "ear":
            ear = values[0]
            if ear < 0:
                raise MalformedRowError(number, "ear must be non-negative")
        else:
            pts = np.asarray(values).reshape(2, 6, 2)
            try:
                sample = frame_ear(LandmarkFrame(int(frame), ts, pts[0], pts[1]))
            except DegenerateEyeError:
                report.rows_dropped += 1
                continue
            report.single_eye_frames += sample.single_eye
            ear = sample.ear
        frames.append(int(frame))
        stamps.append(ts)
        ears.append(ear)

    frames = np.asarray(frames, dtype=np.int64)
    stamps = np.asarray(stamps, dtype=float)
    ears = np.asarray(ears, dtype=float)
    order = np.argsort(frames, kind="stable")
    frames, stamps, ears = frames[order], stamps[order], ears[order]
    if len(frames):
        keep = np.r_[True, np.diff(frames) != 0]
        report.rows_dropped += int(np.sum(~keep))
        frames, stamps, ears = frames[keep], stamps[keep], ears[keep]

    if fps is None:
        fps = _estimate_fps(frames, stamps)
    frames, stamps, ears, filled = repair_gaps(frames, stamps, ears)
    report.frames_interpolated = filled
    series = EarSeries(frames, ears, stamps, fps, report)
    report.segments = sum(1 for _ in series.segments())
    return series


def _estimate_fps(frames, stamps, default=30.0) -> float:
    if len(frames) < 2:
        return default
    df = np.diff(frames)
    dt = np.diff(stamps)
    ok = (df > 0) & (dt > 0)
    if not np.any(ok):
        return default
    return float(1000.0 / np.median(dt[ok] / df[ok]))


def repair_gaps(frames, stamps, ears, max_gap: int = MAX_INTERP_GAP):
    """Linearly interpolate runs of at most ``max_gap`` missing frames.

    Returns the repaired (frames, stamps, ears) and the number of filled frames.
    """
    if len(frames) < 2:
        return frames, stamps, ears, 0
    jumps = np.diff(frames)
    fill = np.flatnonzero((jumps > 1) & (jumps <= max_gap + 1))
    if not len(fill):
        return frames, stamps, ears, 0
    new_frames = np.concatenate([np.arange(frames[i] + 1, frames[i + 1]) for i in fill])
    all_frames = np.concatenate([frames, new_frames])
    order = np.argsort(all_frames, kind="stable")
    all_frames = all_frames[order]
    # interpolation within each filled gap only uses its two bounding frames
    new_ears = np.interp(new_frames, frames, ears)
    new_stamps = np.interp(new_frames, frames, stamps)
    return (
        all_frames,
        np.concatenate([stamps, new_stamps])[order],
        np.concatenate([ears, new_ears])[order],
        len(new_frames),
    )


# ---------------------------------------------------------------------------
# writing


def _fmt(x: float) -> str:
    return repr(float(x))


def write_ear(series: EarSeries, dest: PathOrFile, provenance: Optional[dict] = None) -> None:
    """Serialize an EAR series; floats are written in shortest round-trip form."""
    fh, owned = _open_text(dest, "w")
    try:
        fh.write(EAR_VERSION + "\n")
        _write_provenance(fh, provenance)
        fh.write(",".join(EAR_COLUMNS) + "\n")
        for f, t, e in zip(series.frames, series.timestamps_ms, series.ear):
            fh.write(f"{int(f)},{_fmt(t)},{_fmt(e)}\n")
    finally:
        if owned:
            fh.close()


def write_landmarks(frames: Iterable[LandmarkFrame], dest: PathOrFile, provenance: Optional[dict] = None) -> None:
    fh, owned = _open_text(dest, "w")
    try:
        fh.write(LANDMARK_VERSION + "\n")
        _write_provenance(fh, provenance)
        fh.write(",".join(LANDMARK_COLUMNS) + "\n")
        for fr in frames:
            coords = np.concatenate([fr.left_eye.ravel(), fr.right_eye.ravel()])
            fh.write(f"{fr.frame_index},{_fmt(fr.timestamp_ms)}," + ",".join(_fmt(c) for c in coords) + "\n")
    finally:
        if owned:
            fh.close()


def _write_provenance(fh, provenance: Optional[dict]) -> None:
    for key, value in (provenance or {}).items():
        fh.write(f"# {key}: {value}\n")


def read_text(source: PathOrFile) -> str:
    fh, owned = _open_text(source)
    try:
        return fh.read()
    finally:
        if owned:
            fh.close()


def ear_to_eye(ear: float, width: float = 30.0, origin=(0.0, 0.0), angle: float = 0.0) -> np.ndarray:
    """Six eye landmarks whose aspect ratio is exactly ``ear`` (for test streams)."""
    half = ear * width / 4.0
    pts = np.array(
        [
            [0.0, 0.0],
            [width / 3, half],
            [2 * width / 3, half],
            [width, 0.0],
            [2 * width / 3, -half],
            [width / 3, -half],
        ]
    )
    c, s = np.cos(angle), np.sin(angle)
    return pts @ np.array([[c, s], [-s, c]]) + np.asarray(origin, dtype=float)


__all__ = [
    "EAR_VERSION",
    "LANDMARK_VERSION",
    "EarSample",
    "EarSeries",
    "LandmarkFrame",
    "ParseReport",
    "compute_ear",
    "ear_to_eye",
    "frame_ear",
    "load_stream",
    "repair_gaps",
    "write_ear",
    "write_landmarks",
]
