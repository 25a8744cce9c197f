"""Synthetic EAR streams with planted blinks, and RLDD-shaped datasets built
from them (three labelled videos per subject)."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .dataset import VideoRecord, write_manifest
from .detection import BlinkEvent
from .landmarks import EarSeries, LandmarkFrame, _write_provenance, ear_to_eye

STATES = ("alert", "low_vigilant", "drowsy")
STATE_LABELS = {"alert": 0, "low_vigilant": 5, "drowsy": 10}
TRUTH_VERSION = "# blinkwise-truth v1"


@dataclass(frozen=True)
class StateProfile:
    """Gaussian blink statistics for one drowsiness state.

    Durations and gaps are in frames, amplitude in EAR units (dip depth
    below the open-eye baseline), velocity in EAR units per frame.
    """

    duration: Tuple[float, float]
    amplitude: Tuple[float, float]
    velocity: Tuple[float, float]
    gap: Tuple[float, float]


DEFAULT_STATES = {
    "alert": StateProfile((8.0, 1.5), (0.21, 0.025), (0.035, 0.008), (120.0, 30.0)),
    "low_vigilant": StateProfile((11.0, 2.25), (0.195, 0.025), (0.025, 0.0065), (95.0, 25.0)),
    "drowsy": StateProfile((14.0, 3.0), (0.18, 0.025), (0.015, 0.005), (70.0, 20.0)),
}


@dataclass(frozen=True)
class SynthProfile:
    states: Dict[str, StateProfile] = field(default_factory=lambda: dict(DEFAULT_STATES))
    baseline: float = 0.30
    noise_sigma: float = 0.01
    min_gap: int = 3
    # shortest closing / opening ramp, frames
    min_phase: int = 3
    amplitude_range: Tuple[float, float] = (0.15, 0.28)
    # relative spread of the per-subject multiplicative offsets
    subject_spread: float = 0.12
    seed: int = 0

    def __post_init__(self):
        for name in STATES:
            st = self.states[name]
            for mean, sd in (st.duration, st.amplitude, st.velocity, st.gap):
                if not (mean > 0 and sd >= 0):
                    raise ValueError(f"{name}: distribution parameters must be positive")
        if not self.states["drowsy"].duration[0] > self.states["alert"].duration[0]:
            raise ValueError("drowsy blinks must last longer than alert blinks on average")
        if not self.states["drowsy"].velocity[0] < self.states["alert"].velocity[0]:
            raise ValueError("drowsy eye opening must be slower than alert on average")
        if self.baseline <= 0 or self.noise_sigma < 0 or self.min_gap < 1:
            raise ValueError("baseline must be positive, noise non-negative, min_gap >= 1")

    def perturbed(self, rng: np.random.Generator) -> "SynthProfile":
        """A subject-specific profile: every state's means scaled by common factors."""
        if self.subject_spread == 0:
            return self
        k = 1.0 + self.subject_spread * rng.standard_normal(4)
        k = np.clip(k, 0.6, 1.6)
        states = {}
        for name, st in self.states.items():
            states[name] = StateProfile(
                (st.duration[0] * k[0], st.duration[1]),
                (st.amplitude[0] * k[1], st.amplitude[1]),
                (st.velocity[0] * k[2], st.velocity[1]),
                (st.gap[0] * k[3], st.gap[1]),
            )
        return replace(self, states=states)


def _draw_blink(st: StateProfile, profile: SynthProfile, rng) -> Tuple[int, int, float]:
    """(closing frames, opening frames, depth) for one blink."""
    m = profile.min_phase
    duration = max(2 * m + 1, int(round(rng.normal(*st.duration))))
    lo, hi = profile.amplitude_range
    depth = float(np.clip(rng.normal(*st.amplitude), lo, min(hi, profile.baseline - 0.01)))
    velocity = max(rng.normal(*st.velocity), 1e-3)
    n_open = int(np.clip(round(depth / velocity), m, duration - 1 - m))
    return duration - 1 - n_open, n_open, depth


def gen_ear_stream(
    profile: SynthProfile,
    state: str,
    n_blinks: int,
    fps: float = 30.0,
    rng: Optional[np.random.Generator] = None,
    noise_sigma: Optional[float] = None,
    n_frames: Optional[int] = None,
) -> Tuple[EarSeries, List[BlinkEvent]]:
    """Baseline EAR with planted V-shaped dips plus Gaussian noise.

    Each planted blink starts and ends on a baseline frame; consecutive
    blinks are separated by at least ``profile.min_gap`` baseline frames.
    With ``n_frames`` set, blinks are planted until the stream is full and
    ``n_blinks`` is ignored.

    Returns the series and the planted truth (start, bottom, end).
    """
    if n_blinks < 0:
        raise ValueError("n_blinks must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(profile.seed)
    sigma = profile.noise_sigma if noise_sigma is None else noise_sigma
    st = profile.states[state]

    def gap():
        return max(profile.min_gap, int(round(rng.normal(*st.gap))))

    pieces = [np.full(gap(), profile.baseline)]
    cursor = len(pieces[0])
    truth = []
    planted = 0
    while (n_frames is None and planted < n_blinks) or (n_frames is not None and cursor < n_frames):
        n_close, n_open, depth = _draw_blink(st, profile, rng)
        bottom_ear = profile.baseline - depth
        down = np.linspace(profile.baseline, bottom_ear, n_close + 1)
        up = np.linspace(bottom_ear, profile.baseline, n_open + 1)[1:]
        shape = np.r_[down, up]
        if n_frames is not None and cursor + len(shape) > n_frames:
            break
        truth.append(BlinkEvent(cursor, cursor + n_close, cursor + len(shape) - 1,
                                profile.baseline, bottom_ear, profile.baseline))
        pieces.append(shape)
        cursor += len(shape)
        planted += 1
        g = gap()
        if n_frames is not None:
            g = min(g, n_frames - cursor)
        pieces.append(np.full(g, profile.baseline))
        cursor += g
    clean = np.concatenate(pieces)
    noisy = clean + sigma * rng.standard_normal(len(clean)) if sigma > 0 else clean
    noisy = np.maximum(noisy, 0.0)
    series = EarSeries(np.arange(len(noisy)), noisy, np.arange(len(noisy)) * (1000.0 / fps), fps)
    return series, truth


def ear_to_landmark_frames(series: EarSeries, scale: float = 1.0, angle: float = 0.0, offset=(100.0, 80.0)):
    """Landmark frames whose binocular EAR equals the series values."""
    frames = []
    for f, t, e in zip(series.frames, series.timestamps_ms, series.ear):
        left = ear_to_eye(e, 30.0 * scale, np.asarray(offset) * scale, angle)
        right = ear_to_eye(e, 30.0 * scale, (np.asarray(offset) + [60.0, 0.0]) * scale, angle)
        frames.append(LandmarkFrame(int(f), float(t), left, right))
    return frames


def write_truth(truth: List[BlinkEvent], dest, provenance: Optional[dict] = None) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        fh.write(TRUTH_VERSION + "\n")
        _write_provenance(fh, provenance)
        fh.write("start,bottom,end\n")
        for b in truth:
            fh.write(f"{b.start},{b.bottom},{b.end}\n")


def gen_dataset(
    profile: SynthProfile,
    n_subjects: int,
    videos_per_state: int = 1,
    out_dir=None,
    minutes: float = 10.0,
    fps: float = 30.0,
    n_folds: int = 5,
    detector=None,
    provenance: Optional[dict] = None,
) -> List[VideoRecord]:
    """Generate an RLDD-shaped dataset.

    Every subject gets ``videos_per_state`` EAR streams per state drawn from
    a subject-perturbed profile. When ``out_dir`` is given, each stream is
    written as an EAR file, run through ``detector`` (default settings when
    omitted) and the raw blink features written next to it; the manifest
    rows point at the feature files. Subjects are dealt round-robin into
    ``n_folds`` folds after a seeded shuffle.
    """
    from .features import extract_features, write_features
    from .detection import BlinkDetector
    from .landmarks import write_ear

    if n_subjects < n_folds:
        raise ValueError(f"need at least {n_folds} subjects for {n_folds}-fold splits")
    rng = np.random.default_rng(profile.seed)
    order = rng.permutation(n_subjects)
    fold_of = {int(s): int(i % n_folds) + 1 for i, s in enumerate(order)}
    n_frames = int(round(minutes * 60 * fps))
    detector = detector if detector is not None else BlinkDetector()
    if out_dir is not None:
        out_dir = Path(out_dir)
        os.makedirs(out_dir, exist_ok=True)

    records = []
    for subj in range(n_subjects):
        sub_rng = np.random.default_rng([profile.seed, subj])
        sub_profile = profile.perturbed(sub_rng)
        sid = f"s{subj:03d}"
        for state in STATES:
            for k in range(videos_per_state):
                vid = f"{sid}_{state}_{k}"
                series, truth = gen_ear_stream(sub_profile, state, 0, fps, sub_rng, n_frames=n_frames)
                path = ""
                if out_dir is not None:
                    write_ear(series, out_dir / f"{vid}.ear.csv", provenance)
                    write_truth(truth, out_dir / f"{vid}.truth.csv", provenance)
                    feats = extract_features(detector.detect(series), series)
                    write_features(feats, out_dir / f"{vid}.features.csv", provenance=provenance)
                    path = f"{vid}.features.csv"
                records.append(VideoRecord(sid, vid, STATE_LABELS[state], path, fold_of[subj]))
    if out_dir is not None:
        write_manifest(records, out_dir / "manifest.csv", provenance)
    return records


def profile_dict(profile: SynthProfile) -> dict:
    return asdict(profile)
