"""Windowing, the dead-zone loss, Adam and the training loop."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .exceptions import DivergenceError, PreconditionError
from .network import (
    Architecture,
    backward,
    forward,
    heads_and_stack,
    init_params,
    init_state,
    is_weight,
    regress,
    update_running_stats,
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.000053
    delta: float = 1.253
    batch_size: int = 64
    epochs: int = 80
    l2_lambda: float = 0.1
    window: int = 30
    stride: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "epochs", "window", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("learning_rate", "delta", "l2_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.stride > self.window:
            raise ValueError("stride must not exceed the window length")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass
class BlinkSequence:
    """A window of ``T`` feature rows; padded rows are zero with mask False.

    ``blink_ids`` holds the source blink index of every row (-1 for padding),
    so callers can check that no blink crosses video or calibration lines.
    """

    features: np.ndarray
    pad_mask: np.ndarray
    label: float
    video_id: str = ""
    subject_id: str = ""
    blink_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if self.features.ndim != 2 or self.features.shape[1] != 4:
            raise ValueError(f"features must be (T, 4), got {self.features.shape}")
        if self.pad_mask.shape != (len(self.features),):
            raise ValueError("pad_mask length must equal the row count")
        if np.any(self.features[~self.pad_mask] != 0):
            raise ValueError("padded rows must be zero")
        if self.blink_ids is None:
            self.blink_ids = np.where(self.pad_mask, np.cumsum(self.pad_mask) - 1, -1)
        if not 0 <= self.label <= 10:
            raise ValueError(f"label must lie in [0, 10], got {self.label}")

    @property
    def T(self) -> int:
        return len(self.features)


def make_sequences(
    features,
    label: float,
    T: int = 30,
    stride: int = 2,
    video_id: str = "",
    subject_id: str = "",
    blink_ids=None,
) -> List[BlinkSequence]:
    """Slide a ``T``-blink window over one video's normalized features.

    Windows start at 0, ``stride``, ... and are emitted only while fully
    inside the video. A video with fewer than ``T`` blinks yields a single
    front-padded sequence.
    """
    X = np.asarray(features, dtype=float).reshape(-1, 4)
    n = len(X)
    if n == 0:
        raise PreconditionError(f"video {video_id or '?'} has no blinks to sequence")
    ids = np.arange(n) if blink_ids is None else np.asarray(blink_ids)
    if n < T:
        feats = np.zeros((T, 4))
        feats[T - n:] = X
        mask = np.zeros(T, dtype=bool)
        mask[T - n:] = True
        bid = np.full(T, -1, dtype=np.int64)
        bid[T - n:] = ids
        return [BlinkSequence(feats, mask, label, video_id, subject_id, bid)]
    return [
        BlinkSequence(X[s:s + T], np.ones(T, dtype=bool), label, video_id, subject_id, ids[s:s + T])
        for s in range(0, n - T + 1, stride)
    ]


def stack_sequences(seqs: Sequence[BlinkSequence]):
    """(B, mask, targets) batch arrays."""
    if not len(seqs):
        raise PreconditionError("empty batch")
    B = np.stack([s.features for s in seqs])
    mask = np.stack([s.pad_mask for s in seqs])
    y = np.array([s.label for s in seqs], dtype=float)
    return B, mask, y


# ---------------------------------------------------------------------------
# objective


def dead_zone_loss(out, targets, delta: float) -> float:
    """mean_i max(0, (out_i - t_i)^2 - delta)."""
    out = np.asarray(out, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if out.shape != targets.shape or out.size == 0:
        raise ValueError("outputs and targets must be non-empty and aligned")
    return float(np.mean(np.maximum(0.0, (out - targets) ** 2 - delta)))


def dead_zone_grad(out, targets, delta: float) -> np.ndarray:
    r = np.asarray(out, dtype=float) - np.asarray(targets, dtype=float)
    return np.where(r * r > delta, 2.0 * r / r.size, 0.0)


def l2_penalty(params, lam: float) -> float:
    return float(lam * sum(np.sum(v * v) for k, v in params.items() if is_weight(k)))


def add_l2_grad(grads, params, lam: float) -> None:
    if lam == 0:
        return
    for k, v in params.items():
        if is_weight(k):
            grads[k] += 2.0 * lam * v


class Adam:
    """Adam with bias correction; updates ``params`` in place, key order fixed."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in params:
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _batches(n: int, size: int, order: np.ndarray) -> List[np.ndarray]:
    parts = [order[i:i + size] for i in range(0, n, size)]
    # a lone trailing sequence would give degenerate batch-norm statistics
    if len(parts) > 1 and len(parts[-1]) == 1:
        last = parts.pop()
        parts[-1] = np.r_[parts[-1], last]
    return parts


@dataclass
class TrainResult:
    arch: Architecture
    params: Dict[str, np.ndarray]
    state: Dict[str, np.ndarray]
    loss_trace: List[float]
    steps: int


def train(
    seqs: Sequence[BlinkSequence],
    config: TrainConfig = TrainConfig(),
    arch: Optional[Architecture] = None,
    params=None,
    state=None,
    boundary: str = "hard",
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Fit the network on ``seqs``.

    Parameters are initialized from ``config.seed``; batch order is
    reshuffled every epoch from a generator derived from the same seed. The
    trace holds the mean data loss (without the L2 term) per epoch.

    Raises:
        PreconditionError: empty training set.
        DivergenceError: a non-finite loss or activation.
    """
    if not len(seqs):
        raise PreconditionError("cannot train on an empty set of sequences")
    B_all, mask_all, y_all = stack_sequences(seqs)
    arch = arch or Architecture(T=B_all.shape[1])
    if arch.T != B_all.shape[1]:
        raise ValueError(f"sequence length {B_all.shape[1]} does not match architecture T={arch.T}")
    init_rng = np.random.default_rng([config.seed, 0])
    shuffle_rng = np.random.default_rng([config.seed, 1])
    params = {k: v.copy() for k, v in params.items()} if params is not None else init_params(arch, init_rng)
    state = {k: v.copy() for k, v in state.items()} if state is not None else init_state(arch)
    opt = Adam(config.learning_rate)
    n = len(seqs)
    trace = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in _batches(n, config.batch_size, shuffle_rng.permutation(n)):
            out, cache = forward(params, state, B_all[idx], mask_all[idx], arch, train=True, boundary=boundary)
            loss = dead_zone_loss(out, y_all[idx], config.delta)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch + 1}")
            grads = backward(params, cache, dead_zone_grad(out, y_all[idx], config.delta))
            add_l2_grad(grads, params, config.l2_lambda)
            opt.step(params, grads)
            update_running_stats(state, cache)
            total += loss * len(idx)
        trace.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, trace[-1])
    return TrainResult(arch, params, state, trace, opt.t)


def predict(arch: Architecture, params, state, seqs: Sequence[BlinkSequence], batch_size: int = 256) -> np.ndarray:
    """Eval-mode outputs, one per sequence."""
    if not len(seqs):
        return np.empty(0)
    B, mask, _ = stack_sequences(seqs)
    outs = [forward(params, state, B[i:i + batch_size], mask[i:i + batch_size], arch)[0]
            for i in range(0, len(B), batch_size)]
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# gradient check


def relative_error(a, b, floor: float = 1e-3) -> float:
    """||a - b|| / max(||a||, ||b||, floor).

    The absolute floor keeps tensors whose exact gradient is zero (biases that
    feed straight into batch norm) from being judged on rounding noise alone.
    """
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    scale = max(na, nb)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(scale, floor))


@dataclass
class GradcheckReport:
    errors: Dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst_tensor(self) -> str:
        return max(self.errors, key=self.errors.get)

    @property
    def flagged(self) -> List[str]:
        return [k for k, e in self.errors.items() if e >= self.tolerance]


def objective(params, state, arch, B, mask, y, delta, lam, boundary="soft"):
    out, cache = forward(params, state, B, mask, arch, train=True, boundary=boundary)
    return dead_zone_loss(out, y, delta) + l2_penalty(params, lam), out, cache


def analytic_grads(params, state, arch, B, mask, y, delta, lam, boundary="soft"):
    _, out, cache = objective(params, state, arch, B, mask, y, delta, lam, boundary)
    grads = backward(params, cache, dead_zone_grad(out, y, delta))
    add_l2_grad(grads, params, lam)
    return grads


def gradcheck(
    arch: Architecture,
    params,
    B,
    mask,
    y,
    delta: float = 1.253,
    lam: float = 0.1,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    corrupt: Optional[Callable[[dict], None]] = None,
) -> GradcheckReport:
    """Compare backprop with central differences for every tensor (soft boundaries).

    ``corrupt`` may modify the analytic gradient dict in place before the
    comparison (fault injection).
    """
    state = init_state(arch)
    grads = analytic_grads(params, state, arch, B, mask, y, delta, lam)
    if corrupt is not None:
        corrupt(grads)
    _, _, cache = objective(params, state, arch, B, mask, y, delta, lam)
    h_last = cache["stack"]["h_last"]

    def data_loss(name):
        # tensors downstream of the recurrence can reuse its final states
        if name.split(".")[0][:4] in ("head", "fc2", "fc3", "fc4", "out"):
            e4, _ = heads_and_stack(h_last, params, arch.n_layers, state, train=True)
            return dead_zone_loss(regress(e4, params), y, delta)
        out, _ = forward(params, state, B, mask, arch, train=True, boundary="soft")
        return dead_zone_loss(out, y, delta)

    errors = {}
    for name, value in params.items():
        weight = is_weight(name)
        numeric = np.zeros_like(value)
        flat, nflat = value.reshape(-1), numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = data_loss(name) + (lam * (flat[j] ** 2 - orig ** 2) if weight else 0.0)
            flat[j] = orig - step
            fm = data_loss(name) + (lam * (flat[j] ** 2 - orig ** 2) if weight else 0.0)
            flat[j] = orig
            nflat[j] = (fp - fm) / (2.0 * step)
        errors[name] = relative_error(grads[name], numeric)
    return GradcheckReport(errors, tolerance)


def small_instance(seed: int, T: int = 5, width: int = 4, batch: int = 3):
    """A random tiny network and batch for gradient checks."""
    rng = np.random.default_rng(seed)
    arch = Architecture(T=T, n_features=4, fc1=width, hidden=width, n_layers=4,
                        head=width, fc2=width, fc3=width, fc4=width)
    params = init_params(arch, rng)
    for k, v in params.items():
        if not is_weight(k):
            v += 0.1 * rng.standard_normal(v.shape)
    B = rng.standard_normal((batch, T, 4))
    mask = np.ones((batch, T), dtype=bool)
    mask[0, :2] = False
    B[~mask] = 0.0
    y = rng.choice([0.0, 10.0], size=batch)
    return arch, params, B, mask, y
