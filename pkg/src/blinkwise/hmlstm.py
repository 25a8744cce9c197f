"""Hierarchical multiscale LSTM stack: forward recurrence and backward pass.

Per layer ``l`` the parameters are

* ``hm{l}.W`` (in, 4H+1)  bottom-up weights (input: FC1 output or layer l-1)
* ``hm{l}.U`` (H, 4H+1)   recurrent weights
* ``hm{l}.V`` (H, 4H+1)   top-down weights from layer l+1 (absent on top)
* ``hm{l}.b`` (4H+1,)     bias

The 4H+1 pre-activation columns are ordered forget, input, output, candidate,
boundary. With ``zp`` the layer's own previous boundary and ``zb`` the
boundary of the layer below at the current step (always 1 for the bottom
layer)::

    s     = h_prev U + zb * (below W) + zp * (h_top_prev V) + b
    kappa = (1 - zp) * (1 - zb)          # COPY weight
    ups   = (1 - zp) * zb                # UPDATE weight; FLUSH weight = zp
    c     = (1 - kappa) * i * g + ups * f * c_prev + kappa * c_prev
    h     = (1 - kappa) * o * tanh(c) + kappa * h_prev
    z     = sigmoid(s_z)                 # soft mode
    z     = [sigmoid(s_z) > 0.5]         # hard mode, straight-through backward

With binary boundaries exactly one of UPDATE / COPY / FLUSH is active.
Time steps with ``mask == 0`` (padding) leave the layer state untouched.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit as sigmoid

from .exceptions import DivergenceError


def layer_shapes(n_layers: int, input_width: int, hidden: int):
    """Mapping of HM-LSTM parameter name to shape."""
    shapes = {}
    cols = 4 * hidden + 1
    for l in range(n_layers):
        shapes[f"hm{l}.W"] = (input_width if l == 0 else hidden, cols)
        shapes[f"hm{l}.U"] = (hidden, cols)
        if l < n_layers - 1:
            shapes[f"hm{l}.V"] = (hidden, cols)
        shapes[f"hm{l}.b"] = (cols,)
    return shapes


def hmlstm_forward(F, mask, params, n_layers, hidden, boundary="hard", force_boundary=None):
    """Run the stack over ``F`` (N, T, in).

    Args:
        mask: (N, T) with 1 for real time steps.
        boundary: ``"hard"`` or ``"soft"``.
        force_boundary: optional (n_layers, T) array; finite entries replace
            the computed boundary value of that layer and step.

    Returns:
        (h_last, cache) where ``h_last`` is a list of (N, H) final hidden
        states, one per layer (bottom first).
    """
    if boundary not in ("hard", "soft"):
        raise ValueError(f"boundary mode must be 'hard' or 'soft', got {boundary!r}")
    N, T, _ = F.shape
    H = hidden
    m_all = np.asarray(mask, dtype=float)
    h = [np.zeros((N, H)) for _ in range(n_layers)]
    c = [np.zeros((N, H)) for _ in range(n_layers)]
    z = [np.zeros((N, 1)) for _ in range(n_layers)]
    steps = []
    h_trace = np.empty((n_layers, T, N, H))
    z_trace = np.empty((n_layers, T, N))
    ones = np.ones((N, 1))

    W0 = params["hm0.W"]
    bottom_in = (F.reshape(N * T, -1) @ W0).reshape(N, T, -1)
    full = m_all.all(axis=0)

    for t in range(T):
        m = m_all[:, t:t + 1]
        below, zb = F[:, t], ones
        new_h, new_c, new_z, layer_cache = [], [], [], []
        for l in range(n_layers):
            hp, cp, zp = h[l], c[l], z[l]
            if l == 0:
                pb = bottom_in[:, t]
                s = hp @ params["hm0.U"] + pb + params["hm0.b"]
            else:
                pb = below @ params[f"hm{l}.W"]
                s = hp @ params[f"hm{l}.U"] + zb * pb + params[f"hm{l}.b"]
            top = None
            pt = None
            if l < n_layers - 1:
                top = h[l + 1]
                pt = top @ params[f"hm{l}.V"]
                s += zp * pt
            gates = sigmoid(s)
            f, i, o = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:3 * H]
            g = np.tanh(s[:, 3 * H:4 * H])
            zs = gates[:, 4 * H:]
            zn = (zs > 0.5).astype(float) if boundary == "hard" else zs
            forced = False
            if force_boundary is not None and np.isfinite(force_boundary[l, t]):
                zn = np.full((N, 1), float(force_boundary[l, t]))
                forced = True

            not_zp = 1.0 - zp
            kappa = not_zp * (1.0 - zb)
            ups = not_zp * zb
            one_k = 1.0 - kappa
            ig = i * g
            cn = one_k * ig + (ups * f + kappa) * cp
            tc = np.tanh(cn)
            hn = one_k * o * tc + kappa * hp

            if not full[t]:
                hn = m * hn + (1.0 - m) * hp
                cn = m * cn + (1.0 - m) * cp
                zn = m * zn + (1.0 - m) * zp

            layer_cache.append((below, zb, hp, cp, zp, top, pb, pt, f, i, o, g, zs, forced, kappa, ups, ig, tc))
            new_h.append(hn)
            new_c.append(cn)
            new_z.append(zn)
            h_trace[l, t] = hn
            z_trace[l, t] = zn[:, 0]
            below, zb = hn, zn
        h, c, z = new_h, new_c, new_z
        steps.append(layer_cache)

    finite = np.isfinite(h_trace).reshape(n_layers, T, -1).all(axis=2)
    if not finite.all():
        l, t = np.argwhere(~finite)[0]
        raise DivergenceError(f"non-finite HM-LSTM activation at layer {l + 1}, time step {t + 1}")

    cache = {
        "steps": steps,
        "mask": m_all,
        "n_layers": n_layers,
        "hidden": H,
        "h_trace": h_trace,
        "z_trace": z_trace,
        "input_shape": F.shape,
    }
    return h, cache


def hmlstm_backward(dh_last, cache, params):
    """Gradients of the stack given gradients w.r.t. the final hidden states.

    Returns ``(grads, dF)`` with ``grads`` keyed like ``params``.
    """
    n_layers, H = cache["n_layers"], cache["hidden"]
    N, T, in_width = cache["input_shape"]
    m_all = cache["mask"]
    grads = {k: np.zeros_like(v) for k, v in params.items() if k.startswith("hm")}
    dF = np.zeros((N, T, in_width))

    gh = [np.array(d, dtype=float) for d in dh_last]
    gc = [np.zeros((N, H)) for _ in range(n_layers)]
    gz = [np.zeros((N, 1)) for _ in range(n_layers)]

    for t in range(T - 1, -1, -1):
        m = m_all[:, t:t + 1]
        gh_prev = [None] * n_layers
        gc_prev = [None] * n_layers
        gz_prev = [None] * n_layers
        for l in range(n_layers - 1, -1, -1):
            below, zb, hp, cp, zp, top, pb, pt, f, i, o, g, zs, forced, kappa, ups, ig, tc = cache["steps"][t][l]
            dhn, dcn, dzn = m * gh[l], m * gc[l], m * gz[l]
            dhp = (1.0 - m) * gh[l]
            dcp = (1.0 - m) * gc[l]
            dzp = (1.0 - m) * gz[l]

            one_k = 1.0 - kappa
            do = dhn * one_k * tc
            dcn = dcn + dhn * one_k * o * (1.0 - tc * tc)
            dkappa = np.sum(dhn * (hp - o * tc), axis=1, keepdims=True)
            dhp += dhn * kappa

            di = dcn * one_k * g
            dg = dcn * one_k * i
            df = dcn * ups * cp
            dcp += dcn * (ups * f + kappa)
            dups = np.sum(dcn * f * cp, axis=1, keepdims=True)
            dkappa += np.sum(dcn * (cp - ig), axis=1, keepdims=True)

            dzp += -dkappa * (1.0 - zb) - dups * zb
            dzb = -dkappa * (1.0 - zp) + dups * (1.0 - zp)

            dzs = np.zeros_like(zs) if forced else dzn
            ds = np.concatenate(
                [df * f * (1 - f), di * i * (1 - i), do * o * (1 - o), dg * (1 - g * g), dzs * zs * (1 - zs)],
                axis=1,
            )

            U, W = params[f"hm{l}.U"], params[f"hm{l}.W"]
            grads[f"hm{l}.U"] += hp.T @ ds
            dhp += ds @ U.T
            dsb = ds * zb
            grads[f"hm{l}.W"] += below.T @ dsb
            dbelow = dsb @ W.T
            dzb += np.sum(ds * pb, axis=1, keepdims=True)
            grads[f"hm{l}.b"] += ds.sum(axis=0)
            if top is not None:
                dst = ds * zp
                grads[f"hm{l}.V"] += top.T @ dst
                gh_prev[l + 1] += dst @ params[f"hm{l}.V"].T
                dzp += np.sum(ds * pt, axis=1, keepdims=True)

            gh_prev[l], gc_prev[l], gz_prev[l] = dhp, dcp, dzp
            if l > 0:
                gh[l - 1] = gh[l - 1] + dbelow
                gz[l - 1] = gz[l - 1] + dzb
            else:
                dF[:, t] = dbelow
        gh, gc, gz = gh_prev, gc_prev, gz_prev
    return grads, dF
