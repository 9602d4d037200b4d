"""Differentiable building blocks written directly in numpy (float64).

Each layer has a forward function that returns ``(output, cache)`` where the
cache holds what the matching ``*_backward`` needs. Parameter groups are plain
dataclasses of arrays; optimizers work on flat ``{name: array}`` dicts.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ParameterError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PROB_CLAMP = 1e-7


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def uniform_init(rng, shape, fan_in):
    bound = 1 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Params:
    def as_dict(self, prefix=""):
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d, prefix=""):
        return cls(**{f.name: d[prefix + f.name] for f in fields(cls)})


@dataclass
class RnnParams(_Params):
    W_x: np.ndarray
    W_h: np.ndarray
    b: np.ndarray

    @property
    def hidden(self):
        return self.b.shape[0]

    @classmethod
    def zeros(cls, hidden=5):
        return cls(np.zeros((hidden, 1)), np.zeros((hidden, hidden)), np.zeros(hidden))

    @classmethod
    def init(cls, rng, hidden=5):
        return cls(
            uniform_init(rng, (hidden, 1), 1),
            uniform_init(rng, (hidden, hidden), hidden),
            np.zeros(hidden),
        )


@dataclass
class GruParams(_Params):
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    W_n: np.ndarray
    U_n: np.ndarray
    b_n: np.ndarray

    @property
    def hidden(self):
        return self.b_z.shape[0]

    @classmethod
    def zeros(cls, hidden=5):
        kw = {}
        for g in "zrn":
            kw[f"W_{g}"] = np.zeros((hidden, 1))
            kw[f"U_{g}"] = np.zeros((hidden, hidden))
            kw[f"b_{g}"] = np.zeros(hidden)
        return cls(**kw)

    @classmethod
    def init(cls, rng, hidden=5):
        kw = {}
        for g in "zrn":
            kw[f"W_{g}"] = uniform_init(rng, (hidden, 1), 1)
            kw[f"U_{g}"] = uniform_init(rng, (hidden, hidden), hidden)
            kw[f"b_{g}"] = np.zeros(hidden)
        return cls(**kw)


@dataclass
class BatchNormParams(_Params):
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def init(cls, features=5):
        return cls(np.ones(features), np.zeros(features))


@dataclass
class BatchNormStats:
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def init(cls, features=5):
        return cls(np.zeros(features), np.ones(features))

    def copy(self):
        return BatchNormStats(self.running_mean.copy(), self.running_var.copy(), self.eps, self.momentum)


@dataclass
class LinearParams(_Params):
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, rng, n_in, n_out=1):
        return cls(uniform_init(rng, (n_out, n_in), n_in), np.zeros(n_out))


# ---------------------------------------------------------------------------
# recurrent cells


def _as_batch(seq, seq_len):
    seq = np.asarray(seq, dtype=np.float64)
    single = seq.ndim == 1
    x = seq[None, :] if single else seq
    if seq_len is not None and x.shape[1] != seq_len:
        raise ParameterError(f"sequence length {x.shape[1]} != configured {seq_len}")
    return x, single


def rnn_step(p, x_i, h_prev):
    """One Elman step: ``tanh(x_i W_x^T + h_prev W_h^T + b)``."""
    x_i = np.asarray(x_i, dtype=np.float64)
    return np.tanh(x_i[..., None] * p.W_x[:, 0] + h_prev @ p.W_h.T + p.b)


def rnn_forward(p, seq, seq_len=64):
    """All hidden states ``h_1..h_T`` (shape ``(T, H)`` or ``(n, T, H)``), h_0 = 0."""
    x, single = _as_batch(seq, seq_len)
    n, T = x.shape
    states = np.empty((n, T, p.hidden))
    h = np.zeros((n, p.hidden))
    for t in range(T):
        h = rnn_step(p, x[:, t], h)
        states[:, t] = h
    return states[0] if single else states


def rnn_backward(p, x, states, dh_out):
    """BPTT for a gradient arriving only at the final state."""
    n, T = x.shape
    g = RnnParams(np.zeros_like(p.W_x), np.zeros_like(p.W_h), np.zeros_like(p.b))
    dh = dh_out
    zero = np.zeros((n, p.hidden))
    for t in range(T - 1, -1, -1):
        h = states[:, t]
        h_prev = states[:, t - 1] if t > 0 else zero
        da = dh * (1 - h * h)
        g.W_x += da.T @ x[:, t : t + 1]
        g.W_h += da.T @ h_prev
        g.b += da.sum(axis=0)
        dh = da @ p.W_h
    return g


def gru_step(p, x_i, h_prev):
    x_i = np.asarray(x_i, dtype=np.float64)[..., None]
    z = sigmoid(x_i * p.W_z[:, 0] + h_prev @ p.U_z.T + p.b_z)
    r = sigmoid(x_i * p.W_r[:, 0] + h_prev @ p.U_r.T + p.b_r)
    cand = np.tanh(x_i * p.W_n[:, 0] + (r * h_prev) @ p.U_n.T + p.b_n)
    return (1 - z) * h_prev + z * cand, (z, r, cand)


def gru_forward(p, seq, seq_len=64, return_gates=False):
    x, single = _as_batch(seq, seq_len)
    n, T = x.shape
    states = np.empty((n, T, p.hidden))
    gates = []
    h = np.zeros((n, p.hidden))
    for t in range(T):
        h, g = gru_step(p, x[:, t], h)
        states[:, t] = h
        gates.append(g)
    out = states[0] if single else states
    return (out, gates) if return_gates else out


def gru_backward(p, x, states, gates, dh_out):
    n, T = x.shape
    g = GruParams(**{k: np.zeros_like(v) for k, v in p.as_dict().items()})
    dh = dh_out
    zero = np.zeros((n, p.hidden))
    for t in range(T - 1, -1, -1):
        z, r, cand = gates[t]
        h_prev = states[:, t - 1] if t > 0 else zero
        xt = x[:, t : t + 1]
        dz = dh * (cand - h_prev)
        dcand = dh * z
        dh_prev = dh * (1 - z)
        da_n = dcand * (1 - cand * cand)
        g.W_n += da_n.T @ xt
        g.U_n += da_n.T @ (r * h_prev)
        g.b_n += da_n.sum(axis=0)
        drh = da_n @ p.U_n
        dr = drh * h_prev
        dh_prev += drh * r
        da_z = dz * z * (1 - z)
        g.W_z += da_z.T @ xt
        g.U_z += da_z.T @ h_prev
        g.b_z += da_z.sum(axis=0)
        dh_prev += da_z @ p.U_z
        da_r = dr * r * (1 - r)
        g.W_r += da_r.T @ xt
        g.U_r += da_r.T @ h_prev
        g.b_r += da_r.sum(axis=0)
        dh_prev += da_r @ p.U_r
        dh = dh_prev
    return g


# ---------------------------------------------------------------------------
# batch norm, linear


def batchnorm_forward(p, stats, batch, mode="train"):
    """Batch normalization. Train mode updates ``stats`` in place."""
    x = np.asarray(batch, dtype=np.float64)
    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise ParameterError(f"batch norm in train mode needs a batch of at least 2, got {n}")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1 / np.sqrt(var + stats.eps)
        xhat = (x - mu) * inv_std
        m = stats.momentum
        stats.running_mean = (1 - m) * stats.running_mean + m * mu
        stats.running_var = (1 - m) * stats.running_var + m * var * n / (n - 1)
        return p.gamma * xhat + p.beta, (xhat, inv_std)
    if mode != "infer":
        raise ParameterError(f"unknown batch-norm mode {mode!r}")
    xhat = (x - stats.running_mean) / np.sqrt(stats.running_var + stats.eps)
    return p.gamma * xhat + p.beta, (xhat, None)


def batchnorm_backward(p, cache, dy):
    xhat, inv_std = cache
    g = BatchNormParams((dy * xhat).sum(axis=0), dy.sum(axis=0))
    dxhat = dy * p.gamma
    n = dy.shape[0]
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, g


def linear_forward(p, vec):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != p.W.shape[1]:
        raise ParameterError(f"linear layer expects {p.W.shape[1]} inputs, got {vec.shape[-1]}")
    return vec @ p.W.T + p.b


def linear_backward(p, vec, dout):
    g = LinearParams(dout.T @ vec, dout.sum(axis=0))
    return dout @ p.W, g


# ---------------------------------------------------------------------------
# losses


def bce_loss(p, y, pos_weight=1.0):
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(pos_weight * y * np.log(p) + (1 - y) * np.log(1 - p))))


def bce_grad_logit(logit, y, pos_weight=1.0):
    """d(mean BCE)/d(logit); zero where the probability clamp is active."""
    prob = sigmoid(logit)
    y = np.asarray(y, dtype=np.float64)
    g = (-pos_weight * y * (1 - prob) + (1 - y) * prob) / len(y)
    clamped = (prob < PROB_CLAMP) | (prob > 1 - PROB_CLAMP)
    return np.where(clamped, 0.0, g)


def mse_loss(pred, y):
    d = np.asarray(pred, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.mean(d * d))


def mse_grad(pred, y):
    return 2 * (np.asarray(pred, dtype=np.float64) - y) / len(y)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """Bias-corrected Adam update of ``params`` in place.

    An all-zero gradient is treated as "nothing to learn": neither the
    parameters nor the moment estimates move.
    """
    if set(params) != set(grads):
        raise ParameterError("parameter and gradient names differ")
    for k in params:
        if np.shape(params[k]) != np.shape(grads[k]):
            raise ParameterError(f"shape mismatch for {k}: {np.shape(params[k])} vs {np.shape(grads[k])}")
    if all(not np.any(grads[k]) for k in grads):
        return params, state
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for k in sorted(params):
        g = grads[k]
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn, params, grads, eps=1e-5, atol=1e-6):
    """Worst relative error between ``grads`` and central finite differences.

    ``loss_fn(params)`` must evaluate the loss for the dict of arrays it is
    given; arrays are perturbed in place and restored. Relative error is
    ``|a - n| / max(|a|, |n|, atol)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError("eps must lie in [1e-7, 1e-3]")
    worst = 0.0
    for name in sorted(params):
        arr = params[name]
        flat = arr.reshape(-1)
        ana = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn(params)
            flat[i] = orig - eps
            down = loss_fn(params)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            err = abs(ana[i] - num) / max(abs(ana[i]), abs(num), atol)
            worst = max(worst, err)
    return worst
