"""The drowsiness regression network.

    B (N, T, 4) -> FC1 + BN + ReLU (shared over time, padded rows zeroed)
      -> HM-LSTM stack -> final hidden state of every layer
      -> per-layer head FC + ReLU -> concatenate (layer order 1..n)
      -> FC2 -> FC3 -> FC4 (each + BN + ReLU)
      -> out = 10 * sigmoid(e4 Wo + bo)

Parameters live in a plain ``dict`` of float64 arrays; batch-norm running
statistics live in a separate ``state`` dict. Weight matrices (the only
tensors subject to L2) are the ones whose name ends in ``.W``, ``.U`` or
``.V``.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional, Tuple

import numpy as np

from .exceptions import UnsupportedFormatError
from .hmlstm import hmlstm_backward, hmlstm_forward, layer_shapes, sigmoid

BN_EPS = 1e-5
BN_LAYERS = ("fc1", "fc2", "fc3", "fc4")
MODEL_MAGIC = b"BLINKWISE-MODEL"
MODEL_VERSION = 1

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class Architecture:
    T: int = 30
    n_features: int = 4
    fc1: int = 32
    hidden: int = 32
    n_layers: int = 4
    head: int = 16
    fc2: int = 64
    fc3: int = 32
    fc4: int = 16

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be a positive integer")

    def shapes(self) -> Dict[str, tuple]:
        s = {"fc1.W": (self.n_features, self.fc1), "fc1.b": (self.fc1,)}
        s.update({"fc1.gamma": (self.fc1,), "fc1.beta": (self.fc1,)})
        s.update(layer_shapes(self.n_layers, self.fc1, self.hidden))
        for l in range(self.n_layers):
            s[f"head{l}.W"] = (self.hidden, self.head)
            s[f"head{l}.b"] = (self.head,)
        widths = [self.head * self.n_layers, self.fc2, self.fc3, self.fc4]
        for k, name in enumerate(("fc2", "fc3", "fc4")):
            s[f"{name}.W"] = (widths[k], widths[k + 1])
            s[f"{name}.b"] = (widths[k + 1],)
            s[f"{name}.gamma"] = (widths[k + 1],)
            s[f"{name}.beta"] = (widths[k + 1],)
        s["out.W"] = (self.fc4, 1)
        s["out.b"] = (1,)
        return s

    def bn_widths(self) -> Dict[str, int]:
        return {"fc1": self.fc1, "fc2": self.fc2, "fc3": self.fc3, "fc4": self.fc4}


def is_weight(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in ("W", "U", "V")


def count_parameters(arch: Architecture) -> int:
    return int(sum(np.prod(shape) for shape in arch.shapes().values()))


def init_params(arch: Architecture, rng: np.random.Generator) -> Params:
    """Glorot-uniform weights, zero biases, unit BN scale, boundary bias -1."""
    params = {}
    for name, shape in arch.shapes().items():
        kind = name.rsplit(".", 1)[-1]
        if kind in ("W", "U", "V"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif kind == "gamma":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    for l in range(arch.n_layers):
        params[f"hm{l}.b"][-1] = -1.0
    return params


def init_state(arch: Architecture) -> Params:
    state = {}
    for name, width in arch.bn_widths().items():
        state[f"{name}.running_mean"] = np.zeros(width)
        state[f"{name}.running_var"] = np.ones(width)
    return state


# ---------------------------------------------------------------------------
# building blocks


def _bn_forward(A, gamma, beta, train, running_mean, running_var):
    if train:
        mu = A.mean(axis=0)
        var = A.var(axis=0)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (A - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma, train, mu, var)


def _bn_backward(dy, bn_cache):
    xhat, inv, gamma, train, _, _ = bn_cache
    dgamma = np.sum(dy * xhat, axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    R = len(dy)
    dA = (inv / R) * (R * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
    return dA, dgamma, dbeta


def fc1_transform(B, mask, params, state=None, train=False):
    """Shared-weight transform of every time step; padded rows come out zero.

    Returns (F, cache). ``state`` supplies running BN statistics in eval mode.
    """
    N, T, _ = B.shape
    A = B @ params["fc1.W"] + params["fc1.b"]
    rows = np.asarray(mask, dtype=bool).reshape(-1)
    flat = A.reshape(N * T, -1)
    Y = np.zeros_like(flat)
    bn_cache = None
    if rows.any():
        rm = rv = None
        if not train:
            rm, rv = state["fc1.running_mean"], state["fc1.running_var"]
        Y[rows], bn_cache = _bn_forward(flat[rows], params["fc1.gamma"], params["fc1.beta"], train, rm, rv)
    pre = Y.reshape(N, T, -1)
    F = np.maximum(pre, 0.0) * np.asarray(mask, dtype=float)[:, :, None]
    return F, {"B": B, "rows": rows, "pre": pre, "bn": bn_cache}


def _fc1_backward(dF, cache, params, mask, grads):
    N, T, width = dF.shape
    dpre = dF * (cache["pre"] > 0) * np.asarray(mask, dtype=float)[:, :, None]
    dflat = dpre.reshape(N * T, width)
    dA = np.zeros_like(dflat)
    rows = cache["rows"]
    if cache["bn"] is not None:
        dA_rows, dgamma, dbeta = _bn_backward(dflat[rows], cache["bn"])
        dA[rows] = dA_rows
        grads["fc1.gamma"] += dgamma
        grads["fc1.beta"] += dbeta
    B = cache["B"].reshape(N * T, -1)
    grads["fc1.W"] += B.T @ dA
    grads["fc1.b"] += dA.sum(axis=0)


def heads_and_stack(h_last, params, n_layers, state=None, train=False):
    """Per-layer heads, concatenation and FC2..FC4. Returns (e4, cache)."""
    heads = []
    for l in range(n_layers):
        heads.append(np.maximum(h_last[l] @ params[f"head{l}.W"] + params[f"head{l}.b"], 0.0))
    e = np.concatenate(heads, axis=1)
    cache = {"h_last": h_last, "heads": heads, "layers": []}
    for name in ("fc2", "fc3", "fc4"):
        a = e @ params[f"{name}.W"] + params[f"{name}.b"]
        rm = rv = None
        if not train:
            rm, rv = state[f"{name}.running_mean"], state[f"{name}.running_var"]
        y, bn_cache = _bn_forward(a, params[f"{name}.gamma"], params[f"{name}.beta"], train, rm, rv)
        cache["layers"].append((name, e, y, bn_cache))
        e = np.maximum(y, 0.0)
    return e, cache


def _stack_backward(de4, cache, params, n_layers, grads):
    de = de4
    for name, e_in, y, bn_cache in reversed(cache["layers"]):
        dy = de * (y > 0)
        da, dgamma, dbeta = _bn_backward(dy, bn_cache)
        grads[f"{name}.gamma"] += dgamma
        grads[f"{name}.beta"] += dbeta
        grads[f"{name}.W"] += e_in.T @ da
        grads[f"{name}.b"] += da.sum(axis=0)
        de = da @ params[f"{name}.W"].T
    width = params["head0.W"].shape[1]
    dh = []
    for l in range(n_layers):
        d_head = de[:, l * width:(l + 1) * width] * (cache["heads"][l] > 0)
        grads[f"head{l}.W"] += cache["h_last"][l].T @ d_head
        grads[f"head{l}.b"] += d_head.sum(axis=0)
        dh.append(d_head @ params[f"head{l}.W"].T)
    return dh


def regress(e4, params):
    """out = 10 * sigmoid(e4 Wo + bo), shape (N,)."""
    return 10.0 * sigmoid(e4 @ params["out.W"] + params["out.b"])[:, 0]


# ---------------------------------------------------------------------------
# full network


def forward(params, state, B, mask, arch: Architecture, train=False, boundary="hard", force_boundary=None):
    """Network output for a batch of sequences.

    Args:
        B: (N, T, 4) normalized features, front zero-padded.
        mask: (N, T) true for real blinks.
        train: use batch statistics for batch norm (otherwise running stats).

    Returns:
        (out, cache); ``out`` has shape (N,) with values in (0, 10).
    """
    B = np.asarray(B, dtype=float)
    if B.ndim != 3 or B.shape[2] != arch.n_features:
        raise ValueError(f"expected (N, T, {arch.n_features}) input, got {B.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != B.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match input {B.shape[:2]}")
    F, c1 = fc1_transform(B, mask, params, state, train)
    h_last, ch = hmlstm_forward(F, mask, params, arch.n_layers, arch.hidden, boundary, force_boundary)
    e4, cs = heads_and_stack(h_last, params, arch.n_layers, state, train)
    pre = (e4 @ params["out.W"] + params["out.b"])[:, 0]
    out = 10.0 * sigmoid(pre)
    cache = {"fc1": c1, "hm": ch, "stack": cs, "e4": e4, "out": out, "mask": mask, "arch": arch}
    return out, cache


def backward(params, cache, dout) -> Params:
    """Gradients of ``sum(dout * out)`` w.r.t. every parameter."""
    arch = cache["arch"]
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    out = cache["out"]
    dpre = (np.asarray(dout, dtype=float) * out * (1.0 - out / 10.0))[:, None]
    grads["out.W"] += cache["e4"].T @ dpre
    grads["out.b"] += dpre.sum(axis=0)
    de4 = dpre @ params["out.W"].T
    dh = _stack_backward(de4, cache["stack"], params, arch.n_layers, grads)
    g_hm, dF = hmlstm_backward(dh, cache["hm"], params)
    for k, v in g_hm.items():
        grads[k] += v
    _fc1_backward(dF, cache["fc1"], params, cache["mask"], grads)
    return grads


def update_running_stats(state, cache, momentum=0.9):
    """Fold the batch statistics of a train-mode forward into ``state``."""
    bn = {"fc1": cache["fc1"]["bn"]}
    for name, _, _, bn_cache in cache["stack"]["layers"]:
        bn[name] = bn_cache
    for name, bn_cache in bn.items():
        if bn_cache is None:
            continue
        _, _, _, _, mu, var = bn_cache
        state[f"{name}.running_mean"] = momentum * state[f"{name}.running_mean"] + (1 - momentum) * mu
        state[f"{name}.running_var"] = momentum * state[f"{name}.running_var"] + (1 - momentum) * var


# ---------------------------------------------------------------------------
# persistence


@dataclass
class ModelBundle:
    arch: Architecture
    params: Params
    state: Params
    extras: Params = field(default_factory=dict)
    meta: Dict[str, str] = field(default_factory=dict)


def save_model(
    dest,
    arch: Architecture,
    params: Params,
    state: Params,
    extras: Optional[Params] = None,
    meta: Optional[Dict[str, str]] = None,
) -> bytes:
    """Write the model file and return its bytes.

    Layout (header lines ASCII, ``\\n`` terminated)::

        BLINKWISE-MODEL
        version 1
        arch T=30 n_features=4 fc1=32 hidden=32 n_layers=4 head=16 fc2=64 fc3=32 fc4=16
        meta <count>
        <key> <value>                                          (per entry)
        tensors <count>
        tensor <name> <group> <ndim> <dim_1> ... <dim_ndim>     (per tensor)
        <prod(dims) little-endian float64 values, row-major>
        end

    ``group`` is ``param``, ``state`` (batch-norm running statistics) or
    ``extra`` (normalization statistics and the like). Tensors appear in
    insertion order. Meta keys contain no whitespace; values no newlines.
    """
    buf = io.BytesIO()
    groups = [("param", params), ("state", state), ("extra", extras or {})]
    total = sum(len(g) for _, g in groups)
    meta = meta or {}
    arch_line = " ".join(f"{k}={v}" for k, v in asdict(arch).items())
    buf.write(MODEL_MAGIC + b"\n")
    buf.write(f"version {MODEL_VERSION}\narch {arch_line}\nmeta {len(meta)}\n".encode("ascii"))
    for key, value in meta.items():
        if not key or any(c.isspace() for c in key) or "\n" in str(value):
            raise ValueError(f"invalid meta entry {key!r}")
        buf.write(f"{key} {value}\n".encode("utf-8"))
    buf.write(f"tensors {total}\n".encode("ascii"))
    for group, tensors in groups:
        for name, value in tensors.items():
            arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
            dims = " ".join(str(d) for d in arr.shape)
            buf.write(f"tensor {name} {group} {arr.ndim} {dims}".rstrip().encode("ascii") + b"\n")
            buf.write(arr.tobytes(order="C"))
    buf.write(b"end\n")
    data = buf.getvalue()
    if dest is not None:
        with open(dest, "wb") as fh:
            fh.write(data)
    return data


def load_model(source) -> ModelBundle:
    """Inverse of :func:`save_model`."""
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    stream = io.BytesIO(data)

    def line():
        return stream.readline().rstrip(b"\n").decode("utf-8")

    if stream.readline().rstrip(b"\n") != MODEL_MAGIC:
        raise UnsupportedFormatError("not a blinkwise model file")
    version = line()
    if version != f"version {MODEL_VERSION}":
        raise UnsupportedFormatError(f"unsupported model {version!r}")
    try:
        arch_tokens = line().split()[1:]
        arch = Architecture(**{k: int(v) for k, v in (t.split("=") for t in arch_tokens)})
        meta = {}
        for _ in range(int(line().split()[1])):
            key, _, value = line().partition(" ")
            meta[key] = value
        count = int(line().split()[1])
        out = {"param": {}, "state": {}, "extra": {}}
        for _ in range(count):
            tok = line().split()
            name, group, ndim = tok[1], tok[2], int(tok[3])
            shape = tuple(int(d) for d in tok[4:4 + ndim])
            n = int(np.prod(shape)) if shape else 1
            raw = stream.read(8 * n)
            if len(raw) != 8 * n:
                raise UnsupportedFormatError("truncated model file")
            out[group][name] = np.frombuffer(raw, dtype="<f8").astype(float).reshape(shape)
    except (IndexError, KeyError, ValueError, TypeError) as exc:
        raise UnsupportedFormatError(f"corrupt model file: {exc}") from None
    if line() != "end":
        raise UnsupportedFormatError("truncated model file")
    return ModelBundle(arch, out["param"], out["state"], out["extra"], meta)


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
