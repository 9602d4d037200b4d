"""Estimator front-ends for the hybrid network.

The estimators consume *featurized* rows (see
:class:`~abdoscan.features.SequenceFeaturizer`); :class:`HybridModel` bundles a
fitted featurizer with a fitted network and takes raw
``[64 circumferences | height, weight, GA]`` rows.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import network, nn
from .errors import CapabilityError, ParameterError, StateError
from .features import SD_FLOOR
from .training import train_loop


class _HybridNet(BaseEstimator):
    _task = None

    def __init__(
        self,
        variant="PCA+RNN+FC",
        hidden_size=5,
        n_components=3,
        seq_len=64,
        learning_rate=1e-2,
        max_epochs=2000,
        patience=50,
        min_delta=1e-6,
        pos_weight=1.0,
        random_state=0,
    ):
        self.variant = variant
        self.hidden_size = hidden_size
        self.n_components = n_components
        self.seq_len = seq_len
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.pos_weight = pos_weight
        self.random_state = random_state

    def _architecture(self):
        return network.Architecture(
            self.variant, self._task, self.hidden_size, self.n_components, self.seq_len
        )

    def _rng(self):
        seed = self.random_state
        return np.random.default_rng(list(seed) if isinstance(seed, (tuple, list)) else seed)

    def _encode_target(self, y):
        return np.asarray(y, dtype=np.float64)

    def _fit_target(self, y):
        pass

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on featurized rows; with ``X_val``/``y_val`` use early stopping."""
        arch = self._architecture()
        X = check_array(X, dtype=np.float64)
        arch.columns(X)
        self._fit_target(np.asarray(y, dtype=np.float64))
        t = self._encode_target(y)
        params = network.init_params(arch, self._rng())
        stats = network.init_stats(arch)

        def step(p, s, epoch):
            return network.loss_and_grads(arch, p, s, X, t, self.pos_weight)

        val_fn = None
        if X_val is not None:
            Xv = check_array(X_val, dtype=np.float64)
            tv = self._encode_target(y_val)

            def val_fn(p, s):
                out, _ = network.forward(arch, p, network.calibrated_stats(arch, p, X), Xv, "infer")
                return network.loss_from_output(arch, out, tv, self.pos_weight)

        res = train_loop(
            params, stats, step, val_fn, self.max_epochs, self.patience, self.min_delta, self.learning_rate
        )
        self.arch_ = arch
        self.params_ = res.params
        self.bn_stats_ = network.calibrated_stats(arch, res.params, X) if arch.cell else None
        self.best_epoch_ = res.best_epoch
        self.n_epochs_ = res.epochs_run
        self.loss_curve_ = res.train_curve
        self.val_curve_ = res.val_curve
        return self

    def _output(self, X):
        if not hasattr(self, "params_"):
            raise StateError("network is not fitted")
        X = check_array(X, dtype=np.float64)
        out, _ = network.forward(self.arch_, self.params_, self.bn_stats_, X, "infer")
        return out

    def hidden_states(self, X):
        """Recurrent states for every step, shape ``(n, T, hidden)``."""
        check_is_fitted(self, "params_")
        if not self.arch_.cell:
            raise CapabilityError(f"variant {self.variant} has no recurrent stream")
        seq, _, _ = self.arch_.columns(check_array(X, dtype=np.float64))
        return network.recurrent_states(self.arch_, self.params_, seq)


class HybridNetClassifier(ClassifierMixin, _HybridNet):
    _task = "classification"

    def __init__(self, variant="PCA+RNN+FC", hidden_size=5, n_components=3, seq_len=64,
                 learning_rate=1e-2, max_epochs=2000, patience=50, min_delta=1e-6,
                 pos_weight=1.0, random_state=0, threshold=0.5):
        super().__init__(variant, hidden_size, n_components, seq_len, learning_rate,
                         max_epochs, patience, min_delta, pos_weight, random_state)
        self.threshold = threshold

    def _fit_target(self, y):
        if not np.all((y == 0) | (y == 1)):
            raise ParameterError("classification labels must be 0 or 1")
        self.classes_ = np.array([0, 1])

    def decision_function(self, X):
        return self._output(X)

    def predict_proba(self, X):
        p = nn.sigmoid(self._output(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(int)


class HybridNetRegressor(RegressorMixin, _HybridNet):
    """Regression variant. Targets are standardized internally with training mean/SD."""

    _task = "regression"

    def _fit_target(self, y):
        self.y_mean_ = float(np.mean(y))
        self.y_scale_ = float(max(np.std(y, ddof=1) if len(y) > 1 else 0.0, SD_FLOOR))

    def _encode_target(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean_) / self.y_scale_

    def predict(self, X):
        return self._output(X) * self.y_scale_ + self.y_mean_


def make_network(variant, task_kind, **kw):
    cls = HybridNetClassifier if task_kind == "classification" else HybridNetRegressor
    if task_kind == "regression":
        kw.pop("threshold", None)
    return cls(variant=variant, **kw)


class HybridModel:
    """A fitted featurizer plus a fitted network."""

    def __init__(self, featurizer, net):
        self.featurizer = featurizer
        self.net = net

    @property
    def task_kind(self):
        return self.net._task

    @property
    def variant(self):
        return self.net.variant

    def transform(self, X):
        return self.featurizer.transform(X)

    def predict_output(self, X):
        """Probability of the positive class (classification) or the predicted value."""
        Z = self.featurizer.transform(X)
        if self.task_kind == "classification":
            return self.net.predict_proba(Z)[:, 1]
        return self.net.predict(Z)

    def predict(self, X):
        return self.net.predict(self.featurizer.transform(X))

    def hidden_states(self, X):
        return self.net.hidden_states(self.featurizer.transform(X))


def compose_rows(seqs, basics):
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.float64))
    basics = np.atleast_2d(np.asarray(basics, dtype=np.float64))
    if len(seqs) != len(basics):
        raise ParameterError("sequence and demographic row counts differ")
    return np.hstack([seqs, basics])


def forward_hybrid(model, seq, basic):
    """Scalar output for one participant: probability or regression value."""
    if model.featurizer is None or not hasattr(model.featurizer, "pca_"):
        raise StateError("model normalizers are not fitted")
    seq = np.asarray(seq.values if hasattr(seq, "values") else seq, dtype=np.float64)
    return float(model.predict_output(compose_rows(seq, basic))[0])
