"""Adam training loop with validation-loss early stopping."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError
from .nn import AdamState, adam_step


@dataclass
class LoopResult:
    params: dict
    state: object
    best_epoch: int
    epochs_run: int
    train_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)


def train_loop(
    params,
    state,
    step_fn,
    val_fn=None,
    max_epochs=2000,
    patience=50,
    min_delta=1e-6,
    lr=1e-2,
):
    """Run up to ``max_epochs`` optimizer steps.

    ``step_fn(params, state, epoch)`` returns ``(loss, grads)`` and may update
    ``state`` (batch-norm running statistics). With ``val_fn(params, state)``
    the loop keeps a snapshot of the epoch with the lowest validation loss
    (epoch 0 is the initialization) and stops once ``patience`` epochs pass
    without an improvement larger than ``min_delta``; that snapshot is
    returned. Without ``val_fn`` it runs all epochs and returns the last state.
    """
    adam = AdamState(lr=lr)
    train_curve, val_curve = [], []
    best = None
    if val_fn is not None:
        v0 = val_fn(params, state)
        if not np.isfinite(v0):
            raise DivergenceError(0, "non-finite validation loss")
        val_curve.append(v0)
        best = (v0, 0, copy.deepcopy(params), copy.deepcopy(state))
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        # overflow on a diverging run surfaces as DivergenceError below
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = step_fn(params, state, epoch)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(epoch)
        adam_step(adam, params, grads)
        train_curve.append(float(loss))
        if val_fn is None:
            continue
        with np.errstate(over="ignore", invalid="ignore"):
            v = val_fn(params, state)
        if not np.isfinite(v):
            raise DivergenceError(epoch, "non-finite validation loss")
        val_curve.append(v)
        if v < best[0] - min_delta:
            best = (v, epoch, copy.deepcopy(params), copy.deepcopy(state))
        elif epoch - best[1] >= patience:
            break
    if val_fn is None:
        return LoopResult(params, state, epoch, epoch, train_curve, val_curve)
    _, best_epoch, best_params, best_state = best
    return LoopResult(best_params, best_state, best_epoch, epoch, train_curve, val_curve)
