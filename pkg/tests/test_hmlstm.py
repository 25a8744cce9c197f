import numpy as np
import pytest

from blinkwise.exceptions import DivergenceError
from blinkwise.hmlstm import hmlstm_backward, hmlstm_forward, layer_shapes


def _params(L, n_in, H, seed=0):
    rng = np.random.default_rng(seed)
    return {k: 0.5 * rng.standard_normal(s) for k, s in layer_shapes(L, n_in, H).items()}


def _reference(x, params, L, H):
    """Soft-mode recurrence for one sequence, written out per cell transition."""
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    h = [np.zeros(H) for _ in range(L)]
    c = [np.zeros(H) for _ in range(L)]
    z = [0.0] * L
    for t in range(len(x)):
        prev_h = list(h)
        below, zb = x[t], 1.0
        for l in range(L):
            s = prev_h[l] @ params[f"hm{l}.U"] + zb * (below @ params[f"hm{l}.W"]) + params[f"hm{l}.b"]
            if l < L - 1:
                s = s + z[l] * (prev_h[l + 1] @ params[f"hm{l}.V"])
            f, i, o = sig(s[:H]), sig(s[H:2 * H]), sig(s[2 * H:3 * H])
            g, zt = np.tanh(s[3 * H:4 * H]), sig(s[4 * H])
            flush, update, copy = z[l], (1 - z[l]) * zb, (1 - z[l]) * (1 - zb)
            c_new = flush * (i * g) + update * (f * c[l] + i * g) + copy * c[l]
            h_new = (flush + update) * o * np.tanh(c_new) + copy * prev_h[l]
            h[l], c[l], z[l] = h_new, c_new, zt
            below, zb = h_new, zt
    return h


def test_layer_shapes():
    s = layer_shapes(3, 5, 4)
    assert s["hm0.W"] == (5, 17) and s["hm1.W"] == (4, 17)
    assert "hm2.V" not in s and s["hm1.V"] == (4, 17)


def test_matches_reference_soft():
    L, n_in, H, T, N = 3, 4, 3, 7, 2
    params = _params(L, n_in, H)
    F = np.random.default_rng(1).standard_normal((N, T, n_in))
    h_last, _ = hmlstm_forward(F, np.ones((N, T)), params, L, H, boundary="soft")
    for n in range(N):
        ref = _reference(F[n], params, L, H)
        for l in range(L):
            np.testing.assert_allclose(h_last[l][n], ref[l], rtol=1e-12, atol=1e-14)


def test_single_step_shapes():
    params = _params(4, 32, 32)
    h_last, cache = hmlstm_forward(np.ones((1, 1, 32)), np.ones((1, 1)), params, 4, 32)
    assert [h.shape for h in h_last] == [(1, 32)] * 4
    assert cache["z_trace"].shape == (4, 1, 1)


@pytest.mark.parametrize("mode", ["hard", "soft"])
def test_copy_invariance(mode):
    L, H, T = 3, 4, 8
    params = _params(L, 4, H, seed=3)
    F = np.random.default_rng(4).standard_normal((2, T, 4))
    force = np.zeros((L, T))
    force[:, 0] = 1.0
    _, cache = hmlstm_forward(F, np.ones((2, T)), params, L, H, mode, force_boundary=force)
    trace = cache["h_trace"]
    # after the flush at step 1, layers above the bottom see zb = 0 and copy
    for l in range(1, L):
        np.testing.assert_array_equal(trace[l, -1], trace[l, 1])
    assert not np.allclose(trace[0, -1], trace[0, 1])


def test_hard_boundaries_are_binary():
    params = _params(3, 4, 4, seed=5)
    F = np.random.default_rng(6).standard_normal((3, 6, 4))
    _, cache = hmlstm_forward(F, np.ones((3, 6)), params, 3, 4, "hard")
    assert set(np.unique(cache["z_trace"])) <= {0.0, 1.0}


def test_padding_steps_carry_state():
    params = _params(2, 4, 3, seed=7)
    F = np.random.default_rng(8).standard_normal((1, 5, 4))
    mask = np.array([[0, 0, 1, 1, 1]], dtype=float)
    F_pad = F.copy()
    F_pad[0, :2] = 0.0
    h_pad, _ = hmlstm_forward(F_pad, mask, params, 2, 3, "soft")
    h_short, _ = hmlstm_forward(F[:, 2:], np.ones((1, 3)), params, 2, 3, "soft")
    for a, b in zip(h_pad, h_short):
        np.testing.assert_allclose(a, b, atol=1e-15)


def test_non_finite_activation_raises():
    params = _params(2, 4, 3)
    F = np.zeros((1, 4, 4))
    F[0, 2, 1] = np.nan
    with pytest.raises(DivergenceError, match="time step 3"):
        hmlstm_forward(F, np.ones((1, 4)), params, 2, 3)


def test_unknown_boundary_mode():
    with pytest.raises(ValueError):
        hmlstm_forward(np.zeros((1, 2, 4)), np.ones((1, 2)), _params(2, 4, 3), 2, 3, boundary="fuzzy")


def test_backward_matches_finite_differences_soft():
    L, H, T = 2, 3, 4
    params = _params(L, 4, H, seed=9)
    F = np.random.default_rng(10).standard_normal((2, T, 4))
    mask = np.ones((2, T))
    w = [np.random.default_rng(11 + l).standard_normal((2, H)) for l in range(L)]

    def f():
        h, _ = hmlstm_forward(F, mask, params, L, H, "soft")
        return sum(np.sum(a * b) for a, b in zip(h, w))

    _, cache = hmlstm_forward(F, mask, params, L, H, "soft")
    grads, dF = hmlstm_backward(w, cache, params)
    eps = 1e-6
    for name in ("hm0.U", "hm1.W", "hm0.V", "hm1.b"):
        flat = params[name].reshape(-1)
        num = np.zeros_like(flat)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            fp = f()
            flat[j] = old - eps
            fm = f()
            flat[j] = old
            num[j] = (fp - fm) / (2 * eps)
        np.testing.assert_allclose(grads[name].reshape(-1), num, rtol=1e-5, atol=1e-8)
    assert dF.shape == F.shape


def test_forced_boundary_gets_no_gradient():
    L, H, T = 2, 3, 4
    params = _params(L, 4, H, seed=12)
    F = np.random.default_rng(13).standard_normal((1, T, 4))
    force = np.full((L, T), 1.0)
    _, cache = hmlstm_forward(F, np.ones((1, T)), params, L, H, "soft", force_boundary=force)
    grads, _ = hmlstm_backward([np.ones((1, H))] * L, cache, params)
    for l in range(L):
        assert np.all(grads[f"hm{l}.b"][-1] == 0.0)
        assert np.all(grads[f"hm{l}.U"][:, -1] == 0.0)
