import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abdoscan import nn
from abdoscan.errors import ParameterError


def _rnn(seed=0, hidden=5, scale=1.0):
    rng = np.random.default_rng(seed)
    return nn.RnnParams(
        rng.normal(0, scale, (hidden, 1)), rng.normal(0, scale, (hidden, hidden)), rng.normal(0, scale, hidden)
    )


def _gru(seed=0, hidden=5, scale=0.7):
    rng = np.random.default_rng(seed)
    kw = {}
    for g in "zrn":
        kw[f"W_{g}"] = rng.normal(0, scale, (hidden, 1))
        kw[f"U_{g}"] = rng.normal(0, scale, (hidden, hidden))
        kw[f"b_{g}"] = rng.normal(0, scale, hidden)
    return nn.GruParams(**kw)


def scalar_rnn_step(p, x, h):
    H = len(h)
    return [
        math.tanh(x * p.W_x[i, 0] + sum(h[j] * p.W_h[i, j] for j in range(H)) + p.b[i]) for i in range(H)
    ]


def _sig(a):
    return 1 / (1 + math.exp(-a))


def scalar_gru_step(p, x, h):
    H = len(h)
    z = [_sig(x * p.W_z[i, 0] + sum(h[j] * p.U_z[i, j] for j in range(H)) + p.b_z[i]) for i in range(H)]
    r = [_sig(x * p.W_r[i, 0] + sum(h[j] * p.U_r[i, j] for j in range(H)) + p.b_r[i]) for i in range(H)]
    c = [math.tanh(x * p.W_n[i, 0] + sum(r[j] * h[j] * p.U_n[i, j] for j in range(H)) + p.b_n[i]) for i in range(H)]
    return [(1 - z[i]) * h[i] + z[i] * c[i] for i in range(H)]


# ---------------------------------------------------------------------------
# recurrent cells


def test_rnn_step_zero_params():
    out = nn.rnn_step(nn.RnnParams.zeros(), 3.7, np.ones(5))
    assert np.array_equal(out, np.zeros(5))


def test_rnn_step_bias_only():
    p = nn.RnnParams.zeros()
    p.b[:] = 1.0
    assert np.allclose(nn.rnn_step(p, 2.0, np.zeros(5)), 0.76159, atol=1e-5)


def test_rnn_step_matches_scalar_oracle():
    p = _rnn(1)
    h = np.random.default_rng(2).uniform(-1, 1, 5)
    assert np.allclose(nn.rnn_step(p, 0.3, h), scalar_rnn_step(p, 0.3, h.tolist()), atol=1e-12, rtol=0)


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-1e6, 1e6), seed=st.integers(0, 1000))
def test_rnn_step_bounded(x, seed):
    out = nn.rnn_step(_rnn(seed, scale=0.1), x, np.zeros(5))
    assert np.all(np.abs(out) <= 1.0)
    assert np.all(np.isfinite(out))


def test_rnn_step_strictly_inside_for_moderate_inputs():
    out = nn.rnn_step(_rnn(3), 2.0, np.zeros(5))
    assert np.all(np.abs(out) < 1.0)


def test_rnn_forward_zero_params_all_zero():
    assert np.array_equal(nn.rnn_forward(nn.RnnParams.zeros(), np.ones(64)), np.zeros((64, 5)))


def test_rnn_forward_length_one_is_one_step():
    p = _rnn(4)
    out = nn.rnn_forward(p, np.array([0.7]), seq_len=1)
    assert np.array_equal(out[0], nn.rnn_step(p, 0.7, np.zeros(5)))


def test_rnn_forward_replay_oracle():
    p = _rnn(5, scale=0.5)
    seq = np.random.default_rng(6).normal(size=64)
    h = [0.0] * 5
    for x in seq:
        h = scalar_rnn_step(p, x, h)
    assert np.allclose(nn.rnn_forward(p, seq)[-1], h, atol=1e-12, rtol=0)


def test_rnn_forward_batch_matches_single():
    p = _rnn(7)
    seqs = np.random.default_rng(8).normal(size=(3, 64))
    batch = nn.rnn_forward(p, seqs)
    for i in range(3):
        # matmul versus matvec accumulate in different orders
        assert np.allclose(batch[i], nn.rnn_forward(p, seqs[i]), atol=1e-14, rtol=0)


def test_rnn_forward_wrong_length():
    with pytest.raises(ParameterError):
        nn.rnn_forward(_rnn(), np.ones(63))


def test_gru_zero_params():
    assert np.array_equal(nn.gru_forward(nn.GruParams.zeros(), np.ones(64)), np.zeros((64, 5)))


def test_gru_saturated_update_gate_tracks_candidate():
    p = _gru(9)
    p.b_z[:] = 50.0
    p.W_z[:] = 0.0
    p.U_z[:] = 0.0
    h_prev = np.random.default_rng(10).uniform(-1, 1, 5)
    h, (z, r, cand) = nn.gru_step(p, 0.4, h_prev)
    assert np.max(np.abs(h - cand)) < 1e-9


def test_gru_replay_oracle():
    p = _gru(11)
    seq = np.random.default_rng(12).normal(size=64)
    h = [0.0] * 5
    for x in seq:
        h = scalar_gru_step(p, x, h)
    assert np.allclose(nn.gru_forward(p, seq)[-1], h, atol=1e-12, rtol=0)


# ---------------------------------------------------------------------------
# batch norm and linear


def test_batchnorm_identical_rows_give_beta():
    p = nn.BatchNormParams(np.array([2.0, 3.0]), np.array([0.5, -1.0]))
    out, _ = nn.batchnorm_forward(p, nn.BatchNormStats.init(2), np.tile([[4.0, 7.0]], (5, 1)), "train")
    assert np.allclose(out, [[0.5, -1.0]] * 5)


def test_batchnorm_near_identity():
    x = np.random.default_rng(0).normal(size=(200, 3))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    out, _ = nn.batchnorm_forward(nn.BatchNormParams.init(3), nn.BatchNormStats.init(3), x, "train")
    assert np.max(np.abs(out - x)) < 1e-3


def test_batchnorm_infer_hand_value():
    stats = nn.BatchNormStats(np.array([2.0]), np.array([4.0]))
    out, _ = nn.batchnorm_forward(nn.BatchNormParams.init(1), stats, np.array([[4.0]]), "infer")
    assert abs(out[0, 0] - 2 / math.sqrt(4 + 1e-5)) < 1e-12
    assert abs(out[0, 0] - 0.99999) < 1e-4


def test_batchnorm_train_statistics_and_running_update():
    x = np.random.default_rng(1).normal(3, 2, size=(10, 4))
    stats = nn.BatchNormStats.init(4)
    out, _ = nn.batchnorm_forward(nn.BatchNormParams.init(4), stats, x, "train")
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(out.var(axis=0) - 1) < 1e-5)
    assert np.allclose(stats.running_mean, 0.1 * x.mean(axis=0))
    assert np.allclose(stats.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_batchnorm_unit_variance_when_batch_variance_dominates_eps():
    x = np.random.default_rng(2).normal(3, 20, size=(12, 5))
    out, _ = nn.batchnorm_forward(nn.BatchNormParams.init(5), nn.BatchNormStats.init(5), x, "train")
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(out.var(axis=0) - 1) < 1e-6)


def test_batchnorm_needs_two_rows():
    with pytest.raises(ParameterError):
        nn.batchnorm_forward(nn.BatchNormParams.init(2), nn.BatchNormStats.init(2), np.ones((1, 2)), "train")


def test_linear_forward_examples():
    p = nn.LinearParams(np.zeros((1, 2)), np.array([0.25]))
    assert nn.linear_forward(p, np.array([5.0, 6.0]))[0] == 0.25
    ident = nn.LinearParams(np.eye(3), np.zeros(3))
    assert np.array_equal(nn.linear_forward(ident, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])
    hand = nn.LinearParams(np.array([[1.0, 2.0]]), np.array([0.5]))
    assert nn.linear_forward(hand, np.array([3.0, 4.0]))[0] == 11.5
    with pytest.raises(ParameterError):
        nn.linear_forward(hand, np.ones(3))


# ---------------------------------------------------------------------------
# losses


def test_bce_hand_values():
    assert abs(nn.bce_loss(np.array([0.5]), np.array([1.0])) - math.log(2)) < 1e-12
    assert abs(nn.bce_loss(np.array([0.5]), np.array([0.0])) - 0.693147) < 1e-6
    assert abs(nn.bce_loss(np.array([0.9]), np.array([1.0])) - 0.105361) < 1e-5


def test_bce_clamped_and_finite():
    assert np.isfinite(nn.bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0])))
    assert abs(nn.bce_loss(np.array([0.0]), np.array([1.0])) + math.log(1e-7)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(p=st.floats(0, 1), y=st.sampled_from([0.0, 1.0]))
def test_bce_non_negative_and_minimized_at_label(p, y):
    loss = nn.bce_loss(np.array([p]), np.array([y]))
    assert loss >= 0
    assert nn.bce_loss(np.array([y]), np.array([y])) <= loss + 1e-15


def test_mse_values():
    y = np.array([1.0, 2.0, 3.0])
    assert nn.mse_loss(y, y) == 0.0
    assert nn.mse_loss(np.array([2.0, 2.0, 2.0]), y) == pytest.approx(2 / 3)


def test_bce_grad_logit_matches_difference():
    logit = np.array([-1.2, 0.3, 2.0])
    y = np.array([0.0, 1.0, 1.0])
    g = nn.bce_grad_logit(logit, y, pos_weight=2.0)
    eps = 1e-6
    for i in range(3):
        up, down = logit.copy(), logit.copy()
        up[i] += eps
        down[i] -= eps
        num = (nn.bce_loss(nn.sigmoid(up), y, 2.0) - nn.bce_loss(nn.sigmoid(down), y, 2.0)) / (2 * eps)
        assert abs(num - g[i]) < 1e-8


def test_sigmoid_stable_at_extremes():
    s = nn.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert s.tolist() == [0.0, 0.5, 1.0]


# ---------------------------------------------------------------------------
# backprop


def test_single_step_rnn_gradient_hand_chain_rule():
    p = _rnn(13)
    x = np.array([[0.8], [-0.3]])
    states = nn.rnn_forward(p, x, seq_len=1)
    dh = np.random.default_rng(14).normal(size=(2, 5))
    g = nn.rnn_backward(p, x, states, dh)
    h = states[:, 0]
    da = dh * (1 - h**2)
    assert np.allclose(g.W_x[:, 0], (da * x).sum(axis=0))
    assert np.allclose(g.W_h, 0.0)  # h_0 = 0
    assert np.allclose(g.b, da.sum(axis=0))


def _check(loss_fn, params, grads):
    return nn.grad_check(loss_fn, params, grads, eps=1e-5)


def test_rnn_bptt_finite_differences():
    p = _rnn(15, scale=0.4)
    x = np.random.default_rng(16).normal(size=(3, 64))
    w = np.random.default_rng(17).normal(size=(3, 5))
    params = p.as_dict()

    def loss(d):
        return float(np.sum(w * nn.rnn_forward(nn.RnnParams.from_dict(d), x)[:, -1]))

    states = nn.rnn_forward(p, x)
    grads = nn.rnn_backward(p, x, states, w).as_dict()
    assert _check(loss, params, grads) < 1e-6


def test_gru_bptt_finite_differences():
    p = _gru(18, scale=0.5)
    x = np.random.default_rng(19).normal(size=(3, 64))
    w = np.random.default_rng(20).normal(size=(3, 5))
    params = p.as_dict()

    def loss(d):
        return float(np.sum(w * nn.gru_forward(nn.GruParams.from_dict(d), x)[:, -1]))

    states, gates = nn.gru_forward(p, x, return_gates=True)
    grads = nn.gru_backward(p, x, states, gates, w).as_dict()
    assert _check(loss, params, grads) < 1e-6


def test_batchnorm_backward_finite_differences():
    rng = np.random.default_rng(21)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 3))
    p = nn.BatchNormParams(rng.normal(size=3), rng.normal(size=3))
    params = {"gamma": p.gamma, "beta": p.beta, "x": x}

    def loss(d):
        out, _ = nn.batchnorm_forward(nn.BatchNormParams(d["gamma"], d["beta"]), nn.BatchNormStats.init(3), d["x"])
        return float(np.sum(w * out))

    _, cache = nn.batchnorm_forward(p, nn.BatchNormStats.init(3), x)
    dx, g = nn.batchnorm_backward(p, cache, w)
    assert _check(loss, params, {"gamma": g.gamma, "beta": g.beta, "x": dx}) < 1e-6


def test_grad_check_linear_graph_is_exact():
    rng = np.random.default_rng(22)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 1))
    p = nn.LinearParams(rng.normal(size=(1, 3)), rng.normal(size=1))

    def loss(d):
        return float(np.sum(w * nn.linear_forward(nn.LinearParams.from_dict(d), x)))

    _, g = nn.linear_backward(p, x, w)
    assert _check(loss, p.as_dict(), g.as_dict()) < 1e-9


def test_grad_check_detects_corrupted_gradient():
    p = _rnn(23, scale=0.4)
    x = np.random.default_rng(24).normal(size=(4, 64))
    w = np.random.default_rng(25).normal(size=(4, 5))

    def loss(d):
        return float(np.sum(w * nn.rnn_forward(nn.RnnParams.from_dict(d), x)[:, -1]))

    grads = nn.rnn_backward(p, x, nn.rnn_forward(p, x), w).as_dict()
    grads["W_h"] = grads["W_h"] + 0.1
    assert _check(loss, p.as_dict(), grads) > 1e-2


def test_grad_check_eps_range():
    with pytest.raises(ParameterError):
        nn.grad_check(lambda d: 0.0, {}, {}, eps=1e-2)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_is_identity():
    params = {"w": np.array([1.0, -2.0])}
    state = nn.AdamState()
    nn.adam_step(state, params, {"w": np.array([0.5, 0.5])})
    before = params["w"].copy()
    nn.adam_step(state, params, {"w": np.zeros(2)})
    assert np.array_equal(params["w"], before)


def test_adam_first_step():
    params = {"w": np.array([1.0])}
    nn.adam_step(nn.AdamState(lr=1e-3), params, {"w": np.array([2.0])})
    assert abs((1.0 - params["w"][0]) - 1e-3) < 1e-6


def test_adam_two_steps_hand_recursion():
    lr, b1, b2, eps, g = 1e-3, 0.9, 0.999, 1e-8, 2.0
    params = {"w": np.array([1.0])}
    state = nn.AdamState(lr=lr)
    w, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        nn.adam_step(state, params, {"w": np.array([g])})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    assert params["w"][0] == pytest.approx(w, abs=1e-15)
    assert state.step == 2


def test_adam_shape_mismatch():
    with pytest.raises(ParameterError):
        nn.adam_step(nn.AdamState(), {"w": np.ones(2)}, {"w": np.ones(3)})
    with pytest.raises(ParameterError):
        nn.adam_step(nn.AdamState(), {"w": np.ones(2)}, {"v": np.ones(2)})


def test_uniform_init_bounds():
    w = nn.uniform_init(np.random.default_rng(0), (1000, 4), 4)
    assert np.all(np.abs(w) <= 0.5)
    assert w.min() < -0.45 and w.max() > 0.45
