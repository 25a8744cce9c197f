import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blinkwise.exceptions import PreconditionError
from blinkwise.network import backward, forward, init_params, init_state
from blinkwise.training import (
    Adam,
    BlinkSequence,
    TrainConfig,
    _batches,
    add_l2_grad,
    analytic_grads,
    dead_zone_grad,
    dead_zone_loss,
    gradcheck,
    make_sequences,
    predict,
    small_instance,
    train,
)


def _features(n, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 4))


def test_sliding_windows():
    seqs = make_sequences(_features(34), 5.0, T=30, stride=2)
    assert len(seqs) == 3
    assert [int(s.blink_ids[0]) for s in seqs] == [0, 2, 4]
    assert all(s.pad_mask.all() for s in seqs)


def test_exact_length_single_window():
    seqs = make_sequences(_features(30), 0.0)
    assert len(seqs) == 1 and seqs[0].pad_mask.all()


def test_short_video_is_front_padded():
    X = _features(10)
    (seq,) = make_sequences(X, 10.0, video_id="v")
    assert not seq.features[:20].any() and not seq.pad_mask[:20].any()
    np.testing.assert_array_equal(seq.features[20:], X)
    assert seq.blink_ids[19] == -1 and seq.blink_ids[20] == 0


def test_empty_video_rejected():
    with pytest.raises(PreconditionError):
        make_sequences(np.empty((0, 4)), 0.0)


def test_sequence_validation():
    with pytest.raises(ValueError):
        BlinkSequence(np.ones((3, 4)), np.array([False, True, True]), 0.0)
    with pytest.raises(ValueError):
        BlinkSequence(np.ones((3, 4)), np.ones(3, bool), 11.0)


@settings(max_examples=40)
@given(st.integers(1, 120), st.integers(1, 40), st.integers(1, 40))
def test_windows_stay_inside_video(n, T, stride):
    stride = min(stride, T)
    seqs = make_sequences(_features(n), 5.0, T=T, stride=stride)
    for s in seqs:
        ids = s.blink_ids[s.pad_mask]
        assert np.all(np.diff(ids) == 1) and ids.min() >= 0 and ids.max() < n
    if n >= T:
        assert len(seqs) == (n - T) // stride + 1


@pytest.mark.parametrize(
    "out, t, delta, expected",
    [([5.0], [5.0], 1.253, 0.0), ([6.0], [5.0], 1.253, 0.0), ([7.0], [5.0], 1.0, 3.0), ([7.0, 5.0], [5.0, 5.0], 1.0, 1.5)],
)
def test_dead_zone_loss(out, t, delta, expected):
    assert dead_zone_loss(out, t, delta) == pytest.approx(expected)


def test_dead_zone_grad():
    g = dead_zone_grad([7.0, 5.5, 2.0], [5.0, 5.0, 5.0], 1.0)
    np.testing.assert_allclose(g, [4.0 / 3, 0.0, -2.0])


def test_adam_first_step_is_lr_sized():
    p = {"w": np.array([1.0, -2.0])}
    Adam(0.1).step(p, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-7)


def test_trailing_single_batch_merged():
    parts = _batches(9, 4, np.arange(9))
    assert [len(p) for p in parts] == [4, 5]


def _seqs(n=6, T=6):
    rng = np.random.default_rng(3)
    return [BlinkSequence(rng.standard_normal((T, 4)), np.ones(T, bool), float(rng.choice([0, 5, 10])))
            for _ in range(n)]


def test_zero_learning_rate_keeps_params(tiny_arch):
    params = init_params(tiny_arch, np.random.default_rng(0))
    res = train(_seqs(), TrainConfig(learning_rate=0.0, epochs=3, batch_size=4, window=6), tiny_arch, params)
    for k in params:
        np.testing.assert_array_equal(res.params[k], params[k])


def test_loss_trace_is_bit_identical(tiny_arch):
    cfg = TrainConfig(learning_rate=1e-2, epochs=4, batch_size=4, window=6, seed=5)
    a = train(_seqs(), cfg, tiny_arch)
    b = train(_seqs(), cfg, tiny_arch)
    assert a.loss_trace == b.loss_trace
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_eval_is_permutation_invariant(tiny_model):
    arch, params, state = tiny_model
    seqs = _seqs()
    out = predict(arch, params, state, seqs)
    order = np.random.default_rng(0).permutation(len(seqs))
    np.testing.assert_allclose(predict(arch, params, state, [seqs[i] for i in order]), out[order], rtol=1e-13)


def test_empty_training_set():
    with pytest.raises(PreconditionError):
        train([], TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(window=4, stride=5)


def test_gradcheck_passes_and_flags_corruption():
    arch, params, B, mask, y = small_instance(0, batch=8)
    assert gradcheck(arch, params, B, mask, y).worst < 1e-4

    def corrupt(grads):
        grads["hm1.U"][0, 0] += 0.5

    report = gradcheck(arch, params, B, mask, y, corrupt=corrupt)
    assert report.flagged == ["hm1.U"]


def test_dead_zone_batch_leaves_only_l2(tiny_model):
    arch, params, state = tiny_model
    B = np.random.default_rng(0).standard_normal((4, arch.T, 4))
    mask = np.ones((4, arch.T), bool)
    out, _ = forward(params, state, B, mask, arch, train=True, boundary="soft")
    lam = 0.1
    grads = analytic_grads(params, state, arch, B, mask, out.copy(), 1.253, lam)
    for k, g in grads.items():
        expected = 2 * lam * params[k] if k.rsplit(".", 1)[-1] in ("W", "U", "V") else 0.0
        np.testing.assert_allclose(g, expected, atol=1e-15)


def test_straight_through_reaches_boundary_weights(tiny_arch):
    params = init_params(tiny_arch, np.random.default_rng(2))
    state = init_state(tiny_arch)
    B = np.random.default_rng(3).standard_normal((6, tiny_arch.T, 4))
    mask = np.ones((6, tiny_arch.T), bool)
    y = np.full(6, 10.0)
    out, cache = forward(params, state, B, mask, tiny_arch, train=True, boundary="hard")
    grads = backward(params, cache, dead_zone_grad(out, y, 1.253))
    assert any(np.abs(grads[f"hm{l}.U"][:, -1]).sum() > 0 for l in range(tiny_arch.n_layers))
    before = {l: params[f"hm{l}.U"][:, -1].copy() for l in range(tiny_arch.n_layers)}
    add_l2_grad(grads, params, 0.0)
    Adam(1e-3).step(params, grads)
    assert any(not np.array_equal(params[f"hm{l}.U"][:, -1], before[l]) for l in before)


@settings(max_examples=40)
@given(st.integers(1, 60), st.integers(1, 16))
def test_batches_cover_every_index_once(n, size):
    parts = _batches(n, size, np.random.default_rng(n).permutation(n))
    np.testing.assert_array_equal(np.sort(np.concatenate(parts)), np.arange(n))
    assert n == 1 or size == 1 or all(len(p) > 1 for p in parts)
