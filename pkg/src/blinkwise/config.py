"""Flat key-value run configuration.

File format: one ``key = value`` per line, ``#`` starts a comment, blank
lines are ignored. Keys are grouped by prefix::

    seed = 0
    detector.filter = median
    detector.window = 3
    train.learning_rate = 0.001
    synth.subjects = 15

Unknown keys are an error. Values are parsed to the type of the default.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional

from .exceptions import MalformedRowError, UnsupportedFormatError
from .training import TrainConfig


@dataclass(frozen=True)
class DetectorSettings:
    classifier: str = "threshold"
    threshold: float = 0.2
    filter: str = "median"
    window: int = 3
    context: int = 2
    epsilon: float = 0.01

    def detector(self, weights=None, bias: float = 0.0):
        from .detection import BlinkDetector

        return BlinkDetector(self.classifier, self.threshold, weights, bias, self.filter,
                             self.window, self.context, self.epsilon)


@dataclass(frozen=True)
class SynthSettings:
    subjects: int = 15
    videos_per_state: int = 1
    minutes: float = 10.0
    fps: float = 30.0
    folds: int = 5
    noise_sigma: float = 0.01
    subject_spread: float = 0.12


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    boundary: str = "hard"
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSettings = field(default_factory=SynthSettings)

    _GROUPS = ("detector", "train", "synth")

    def flat(self) -> Dict[str, object]:
        out = {"seed": self.seed, "boundary": self.boundary}
        for group in self._GROUPS:
            for k, v in asdict(getattr(self, group)).items():
                out[f"{group}.{k}"] = v
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                       for k, v in sorted(self.flat().items()))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def with_values(self, values: Dict[str, object]) -> "RunConfig":
        """Copy with ``values`` (flat keys, strings or typed) applied."""
        top, groups = {}, {g: {} for g in self._GROUPS}
        defaults = self.flat()
        for key, raw in values.items():
            if key not in defaults:
                raise KeyError(f"unknown configuration key {key!r}")
            value = _coerce(raw, type(defaults[key]), key)
            if "." in key:
                group, name = key.split(".", 1)
                groups[group][name] = value
            else:
                top[key] = value
        cfg = replace(self, **top)
        for group, changes in groups.items():
            if changes:
                cfg = replace(cfg, **{group: replace(getattr(cfg, group), **changes)})
        if "seed" in top and "train.seed" not in values:
            cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
        return cfg


def _coerce(raw, kind, key):
    if not isinstance(raw, str):
        return kind(raw)
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes")
        return kind(raw.strip())
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str) -> Dict[str, str]:
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedRowError(number, "expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise MalformedRowError(number, "empty key")
        values[key] = value
    return values


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (flags win over the file)."""
    cfg = RunConfig()
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            values = parse_config_text(fh.read())
        try:
            cfg = cfg.with_values(values)
        except (KeyError, ValueError) as exc:
            raise UnsupportedFormatError(f"{path}: {exc}") from None
    if overrides:
        cfg = cfg.with_values({k: v for k, v in overrides.items() if v is not None})
    return cfg


__all__ = ["DetectorSettings", "RunConfig", "SynthSettings", "load_config", "parse_config_text"]
