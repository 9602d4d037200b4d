"""The hybrid recurrent + PCA + demographics network and its ablation variants.

Input rows are already featurized: ``[scaled sequence (T) | z-scored PCA
scores (k) | z-scored demographics (3)]``. The network concatenates the
batch-normalized final recurrent state, the PCA scores and the demographics
(whichever streams the variant keeps) and applies one linear unit. For
classification the output is a logit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ParameterError

VARIANTS = ("FC", "PCA+FC", "RNN+FC", "PCA+GRU+FC", "PCA+RNN+FC")
TASK_KINDS = ("classification", "regression")
N_BASIC = 3


@dataclass(frozen=True)
class Architecture:
    variant: str = "PCA+RNN+FC"
    task: str = "classification"
    hidden: int = 5
    n_pca: int = 3
    seq_len: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.task not in TASK_KINDS:
            raise ParameterError(f"task kind must be one of {TASK_KINDS}, got {self.task!r}")

    @property
    def cell(self):
        if "GRU" in self.variant:
            return "gru"
        if "RNN" in self.variant:
            return "rnn"
        return None

    @property
    def use_pca(self):
        return "PCA" in self.variant

    @property
    def head_in(self):
        return (self.hidden if self.cell else 0) + (self.n_pca if self.use_pca else 0) + N_BASIC

    @property
    def n_inputs(self):
        return self.seq_len + self.n_pca + N_BASIC

    def columns(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise ParameterError(f"expected featurized rows of width {self.n_inputs}, got {X.shape}")
        T, k = self.seq_len, self.n_pca
        return X[:, :T], X[:, T : T + k], X[:, T + k :]


def init_params(arch, rng):
    """Seeded initial parameters: uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    params = {}
    if arch.cell == "rnn":
        params.update(nn.RnnParams.init(rng, arch.hidden).as_dict("rnn."))
    elif arch.cell == "gru":
        params.update(nn.GruParams.init(rng, arch.hidden).as_dict("gru."))
    if arch.cell:
        params.update(nn.BatchNormParams.init(arch.hidden).as_dict("bn."))
    params.update(nn.LinearParams.init(rng, arch.head_in).as_dict("head."))
    return params


def init_stats(arch):
    return nn.BatchNormStats.init(arch.hidden) if arch.cell else None


def check_params(arch, params):
    expected = set(init_params(arch, np.random.default_rng(0)))
    if set(params) != expected:
        raise ParameterError(f"parameter names {sorted(params)} do not match variant {arch.variant}")
    w = params["head.W"]
    if w.shape != (1, arch.head_in):
        raise ParameterError(
            f"head width {w.shape[1] if w.ndim == 2 else w.shape} != {arch.head_in} "
            f"required by variant {arch.variant}"
        )
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise ParameterError(f"parameter {name} has non-finite entries")


def recurrent_states(arch, params, seq):
    if arch.cell == "rnn":
        return nn.rnn_forward(nn.RnnParams.from_dict(params, "rnn."), seq, arch.seq_len)
    if arch.cell == "gru":
        return nn.gru_forward(nn.GruParams.from_dict(params, "gru."), seq, arch.seq_len)
    raise ParameterError(f"variant {arch.variant} has no recurrent stream")


def calibrated_stats(arch, params, X):
    """Batch-norm statistics recomputed exactly over ``X`` for the current weights.

    Momentum averages lag behind the weights during full-batch training; a
    recurrent unit with tiny variance then gets shifted by several SDs at
    inference. Recomputing over the training rows removes that lag.
    """
    if not arch.cell:
        return None
    seq, _, _ = arch.columns(X)
    h = recurrent_states(arch, params, seq)[:, -1]
    n = h.shape[0]
    var = h.var(axis=0) * n / (n - 1) if n > 1 else np.ones(arch.hidden)
    return nn.BatchNormStats(h.mean(axis=0), var)


def forward(arch, params, stats, X, mode="infer"):
    """Head output for each row. ``mode='train'`` uses batch statistics and updates ``stats``."""
    seq, pcs, basic = arch.columns(X)
    cache = {"seq": seq}
    parts = []
    if arch.cell:
        if arch.cell == "rnn":
            states = nn.rnn_forward(nn.RnnParams.from_dict(params, "rnn."), seq, arch.seq_len)
        else:
            states, gates = nn.gru_forward(
                nn.GruParams.from_dict(params, "gru."), seq, arch.seq_len, return_gates=True
            )
            cache["gates"] = gates
        cache["states"] = states
        vec_rnn, cache["bn"] = nn.batchnorm_forward(
            nn.BatchNormParams.from_dict(params, "bn."), stats, states[:, -1], mode
        )
        parts.append(vec_rnn)
    if arch.use_pca:
        parts.append(pcs)
    parts.append(basic)
    fused = np.hstack(parts)
    cache["fused"] = fused
    out = nn.linear_forward(nn.LinearParams.from_dict(params, "head."), fused)[:, 0]
    return out, cache


def backward(arch, params, cache, dout):
    """Gradients of a scalar loss given ``dout = dloss/doutput`` (shape ``(n,)``)."""
    grads = {}
    dfused, g_head = nn.linear_backward(
        nn.LinearParams.from_dict(params, "head."), cache["fused"], dout[:, None]
    )
    grads.update(g_head.as_dict("head."))
    if arch.cell:
        if cache["bn"][1] is None:
            raise ParameterError("backward needs a train-mode forward pass")
        dvec = dfused[:, : arch.hidden]
        dh_out, g_bn = nn.batchnorm_backward(nn.BatchNormParams.from_dict(params, "bn."), cache["bn"], dvec)
        grads.update(g_bn.as_dict("bn."))
        if arch.cell == "rnn":
            p = nn.RnnParams.from_dict(params, "rnn.")
            grads.update(nn.rnn_backward(p, cache["seq"], cache["states"], dh_out).as_dict("rnn."))
        else:
            p = nn.GruParams.from_dict(params, "gru.")
            g = nn.gru_backward(p, cache["seq"], cache["states"], cache["gates"], dh_out)
            grads.update(g.as_dict("gru."))
    return grads


def loss_from_output(arch, out, y, pos_weight=1.0):
    if arch.task == "classification":
        return nn.bce_loss(nn.sigmoid(out), y, pos_weight)
    return nn.mse_loss(out, y)


def batch_loss(arch, params, stats, X, y, pos_weight=1.0, mode="train"):
    """Loss on one batch; never mutates ``stats``."""
    s = stats.copy() if stats is not None else None
    out, _ = forward(arch, params, s, X, mode)
    return loss_from_output(arch, out, y, pos_weight)


def loss_and_grads(arch, params, stats, X, y, pos_weight=1.0):
    """Train-mode loss and exact gradients. Updates ``stats`` (running averages)."""
    y = np.asarray(y, dtype=np.float64)
    out, cache = forward(arch, params, stats, X, "train")
    if arch.task == "classification":
        loss = nn.bce_loss(nn.sigmoid(out), y, pos_weight)
        dout = nn.bce_grad_logit(out, y, pos_weight)
    else:
        loss = nn.mse_loss(out, y)
        dout = nn.mse_grad(out, y)
    return loss, backward(arch, params, cache, dout)
