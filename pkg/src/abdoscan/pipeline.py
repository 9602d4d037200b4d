"""Training protocol: 7:3 split, 5-fold CV with early stopping, final retrain,
baselines and the architecture ablation."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn
from .cohort import ANTHRO_LABELS, anthropometrics, records_to_rows, split_cohort, task_info, task_subset
from .errors import ConditioningError, InsufficientDataError, ParameterError, StratificationError
from .estimators import HybridModel, make_network
from .features import SequenceFeaturizer, fit_normalizer
from .metrics import classification_report, regression_report
from .network import VARIANTS
from .training import train_loop


@dataclass(frozen=True)
class TrainConfig:
    task: str = "gdm"
    variant: str = "PCA+RNN+FC"
    seed: int = 0
    max_epochs: int = 2000
    patience: int = 50
    min_delta: float = 1e-6
    folds: int = 5
    test_fraction: float = 0.3
    learning_rate: float = 1e-2
    threshold: float = 0.5
    pos_weight: float = 1.0
    hidden: int = 5
    n_components: int = 3
    permute_train_labels: bool = False

    def __post_init__(self):
        task_info(self.task)
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")
        if not 0 < self.test_fraction < 1:
            raise ParameterError("test fraction must lie in (0, 1)")
        if self.folds < 2:
            raise ParameterError("folds must be at least 2")
        if self.patience < 1:
            raise ParameterError("patience must be at least 1")
        if self.max_epochs < 0:
            raise ParameterError("max epochs must be non-negative")

    @property
    def kind(self):
        return task_info(self.task)[1]

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class TrainReport:
    config: TrainConfig
    train_ids: tuple
    test_ids: tuple
    fold_train_curves: list
    fold_val_curves: list
    fold_best_epochs: list
    fold_metrics: list
    final_epochs: int
    test_metrics: dict
    test_outputs: list
    test_targets: list
    fingerprint: str
    model: object = field(default=None, repr=False)

    @property
    def cv_summary(self):
        keys = self.fold_metrics[0].keys() if self.fold_metrics else ()
        out = {}
        for k in keys:
            vals = [m[k] for m in self.fold_metrics if m[k] is not None]
            out[k] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "config_digest": self.config.digest(),
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "fold_best_epochs": list(self.fold_best_epochs),
            "fold_metrics": self.fold_metrics,
            "cv_summary": self.cv_summary,
            "final_epochs": self.final_epochs,
            "test_metrics": self.test_metrics,
            "test_outputs": list(self.test_outputs),
            "test_targets": list(self.test_targets),
            "featurizer_fingerprint": self.fingerprint,
            "fold_train_curves": self.fold_train_curves,
            "fold_val_curves": self.fold_val_curves,
        }

    def to_text(self):
        lines = [
            f"task {self.config.task}  variant {self.config.variant}  seed {self.config.seed}",
            f"train {len(self.train_ids)}  test {len(self.test_ids)}",
            "fold  best_epoch  " + "  ".join(f"{k:>10}" for k in (self.fold_metrics[0] if self.fold_metrics else {})),
        ]
        for i, (e, m) in enumerate(zip(self.fold_best_epochs, self.fold_metrics)):
            lines.append(f"{i:>4}  {e:>10}  " + "  ".join(_cell(v) for v in m.values()))
        lines.append(f"final epochs {self.final_epochs}")
        for k, v in self.test_metrics.items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    lines.append(f"test {k}[{kk}] {_cell(vv).strip()}")
            else:
                lines.append(f"test {k} {_cell(v).strip()}")
        return "\n".join(lines) + "\n"


def _cell(v):
    if v is None:
        return f"{'n/a':>10}"
    if isinstance(v, float):
        return f"{v:>10.4f}"
    return f"{v!s:>10}"


def _metrics(kind, outputs, targets, threshold):
    if kind == "classification":
        return classification_report(outputs, targets, threshold).to_dict()
    return regression_report(outputs, targets).to_dict()


def _fold_metric(kind, outputs, targets):
    if kind == "classification":
        rep = classification_report(outputs, targets)
        return {"auc": rep.auc, "accuracy": rep.accuracy}
    rep = regression_report(outputs, targets)
    return {"mae": rep.mae, "mape": rep.mape}


def _estimator_output(est, kind, Z):
    if kind == "classification":
        return est.predict_proba(Z)[:, 1]
    return est.predict(Z)


def _prepare(records, config):
    field_name, kind = task_info(config.task)
    usable = task_subset(records, config.task)
    split = split_cohort(usable, config.task, config.test_fraction, config.folds, config.seed)
    by_id = {r.id: r for r in usable}
    train = [by_id[i] for i in split.train_ids]
    test = [by_id[i] for i in split.test_ids]
    y_train = np.array([r.outcomes[field_name] for r in train], dtype=np.float64)
    y_test = np.array([r.outcomes[field_name] for r in test], dtype=np.float64)
    if kind == "classification":
        for c in (0, 1):
            if np.sum(y_train == c) < config.folds + 1:
                raise StratificationError(
                    f"class {c} has {int(np.sum(y_train == c))} training records; need {config.folds + 1}"
                )
    elif len(train) < config.folds + 1:
        raise InsufficientDataError(f"{len(train)} training records; need {config.folds + 1}")
    if config.permute_train_labels:
        y_train = y_train[np.random.default_rng([config.seed, 99]).permutation(len(y_train))]
    fold_of = np.array([split.folds[r.id] for r in train])
    return kind, split, train, test, y_train, y_test, fold_of


def cross_validate_then_retrain(make_est, Z, y, fold_of, folds, kind, max_epochs):
    """Early-stopped CV on each fold, then retrain on everything for the mean best epoch."""
    curves_t, curves_v, best, metrics = [], [], [], []
    for f in range(folds):
        tr, va = fold_of != f, fold_of == f
        est = make_est(("fold", f), max_epochs)
        est.fit(Z[tr], y[tr], Z[va], y[va])
        curves_t.append(est.loss_curve_)
        curves_v.append(est.val_curve_)
        best.append(int(est.best_epoch_))
        metrics.append(_fold_metric(kind, _estimator_output(est, kind, Z[va]), y[va]))
    final_epochs = int(math.floor(np.mean(best) + 0.5)) if best else 0
    final = make_est(("final", folds), final_epochs)
    final.fit(Z, y)
    return final, final_epochs, curves_t, curves_v, best, metrics


def _seed_of(seed, tag):
    return [int(seed), int(tag[1]) + (0 if tag[0] == "fold" else 1000)]


def train_hybrid(records, config):
    """Full protocol for one variant and task; returns a :class:`TrainReport`."""
    kind, split, train, test, y_train, y_test, fold_of = _prepare(records, config)
    featurizer = SequenceFeaturizer(config.n_components).fit(records_to_rows(train))
    Z_train = featurizer.transform(records_to_rows(train))

    def make_est(tag, epochs):
        return make_network(
            config.variant,
            kind,
            hidden_size=config.hidden,
            n_components=config.n_components,
            learning_rate=config.learning_rate,
            max_epochs=epochs,
            patience=config.patience,
            min_delta=config.min_delta,
            pos_weight=config.pos_weight,
            threshold=config.threshold,
            random_state=_seed_of(config.seed, tag),
        )

    net, final_epochs, ct, cv, best, fm = cross_validate_then_retrain(
        make_est, Z_train, y_train, fold_of, config.folds, kind, config.max_epochs
    )
    model = HybridModel(featurizer, net)
    outputs = model.predict_output(records_to_rows(test))
    return TrainReport(
        config=config,
        train_ids=split.train_ids,
        test_ids=split.test_ids,
        fold_train_curves=ct,
        fold_val_curves=cv,
        fold_best_epochs=best,
        fold_metrics=fm,
        final_epochs=final_epochs,
        test_metrics=_metrics(kind, outputs, y_test, config.threshold),
        test_outputs=[float(v) for v in outputs],
        test_targets=[float(v) for v in y_test],
        fingerprint=featurizer.fingerprint(),
        model=model,
    )


# ---------------------------------------------------------------------------
# baselines


class LogisticBaseline(ClassifierMixin, BaseEstimator):
    """Logistic regression by full-batch gradient descent on z-scored features."""

    def __init__(self, tol=1e-6, max_iter=10000, threshold=0.5):
        self.tol = tol
        self.max_iter = max_iter
        self.threshold = threshold

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.normalizer_ = fit_normalizer(X)
        A = np.hstack([self.normalizer_.apply(X), np.ones((len(X), 1))])
        # step 1/L for the BCE Lipschitz bound 0.25 * lambda_max(A^T A / n)
        lip = 0.25 * np.linalg.eigvalsh(A.T @ A / len(A))[-1]
        step = 1.0 / max(lip, 1e-12)
        w = np.zeros(A.shape[1])
        for it in range(1, self.max_iter + 1):
            g = A.T @ (nn.sigmoid(A @ w) - y) / len(y)
            if np.linalg.norm(g) < self.tol:
                break
            w -= step * g
        self.n_iter_ = it if self.max_iter else 0
        self.w_ = w
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "w_")
        A = np.hstack([self.normalizer_.apply(check_array(X, dtype=np.float64)), np.ones((len(X), 1))])
        p = nn.sigmoid(A @ self.w_)
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(int)


class LinearBaseline(RegressorMixin, BaseEstimator):
    """Least squares via the normal equations with a tiny ridge on the Gram diagonal."""

    def __init__(self, ridge=1e-8):
        self.ridge = ridge

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        norm = fit_normalizer(X)
        A = np.hstack([norm.apply(X), np.ones((len(X), 1))])
        gram = A.T @ A + self.ridge * np.eye(A.shape[1])
        if not np.isfinite(np.linalg.cond(gram)) or np.linalg.cond(gram) > 1e15:
            raise ConditioningError("normal equations are singular even with the ridge term")
        w = np.linalg.solve(gram, A.T @ y)
        if not np.all(np.isfinite(w)):
            raise ConditioningError("normal-equation solution is not finite")
        self.coef_ = w[:-1] / norm.scale
        self.intercept_ = float(w[-1] - np.sum(w[:-1] * norm.mean / norm.scale))
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X, dtype=np.float64) @ self.coef_ + self.intercept_


def train_baseline_logistic(features, labels, config=None):
    return LogisticBaseline(threshold=getattr(config, "threshold", 0.5)).fit(features, labels)


def train_baseline_linear(features, targets, config=None):
    return LinearBaseline().fit(features, targets)


def mlp_init(rng, n_in, hidden):
    return {
        "W1": nn.uniform_init(rng, (hidden, n_in), n_in),
        "b1": np.zeros(hidden),
        "W2": nn.uniform_init(rng, (1, hidden), hidden),
        "b2": np.zeros(1),
    }


def mlp_forward(params, X):
    h = np.tanh(X @ params["W1"].T + params["b1"])
    return (h @ params["W2"].T + params["b2"])[:, 0], h


def mlp_loss_and_grads(params, X, y, kind, pos_weight=1.0):
    out, h = mlp_forward(params, X)
    if kind == "classification":
        loss = nn.bce_loss(nn.sigmoid(out), y, pos_weight)
        dout = nn.bce_grad_logit(out, y, pos_weight)
    else:
        loss = nn.mse_loss(out, y)
        dout = nn.mse_grad(out, y)
    d2 = dout[:, None]
    da = (d2 @ params["W2"]) * (1 - h * h)
    return loss, {"W1": da.T @ X, "b1": da.sum(axis=0), "W2": d2.T @ h, "b2": d2.sum(axis=0)}


class MLPBaseline(BaseEstimator):
    """One-hidden-layer tanh network (the BPNN comparison) trained with Adam."""

    def __init__(self, kind="classification", hidden=8, learning_rate=1e-2, max_epochs=2000,
                 patience=50, min_delta=1e-6, pos_weight=1.0, threshold=0.5, random_state=0):
        self.kind = kind
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.pos_weight = pos_weight
        self.threshold = threshold
        self.random_state = random_state

    def _targets(self, y):
        y = np.asarray(y, dtype=np.float64)
        return y if self.kind == "classification" else (y - self.y_mean_) / self.y_scale_

    def _loss(self, params, X, t):
        out, _ = mlp_forward(params, X)
        if self.kind == "classification":
            return nn.bce_loss(nn.sigmoid(out), t, self.pos_weight)
        return nn.mse_loss(out, t)

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.normalizer_ = fit_normalizer(X)
        Xn = self.normalizer_.apply(X)
        if self.kind == "regression":
            self.y_mean_ = float(y.mean())
            self.y_scale_ = float(max(y.std(ddof=1) if len(y) > 1 else 0.0, 1e-8))
        t = self._targets(y)
        seed = self.random_state
        rng = np.random.default_rng(list(seed) if isinstance(seed, (list, tuple)) else seed)
        params = mlp_init(rng, X.shape[1], self.hidden)

        def step(p, s, epoch):
            return mlp_loss_and_grads(p, Xn, t, self.kind, self.pos_weight)

        val_fn = None
        if X_val is not None:
            Xv = self.normalizer_.apply(check_array(X_val, dtype=np.float64))
            tv = self._targets(y_val)

            def val_fn(p, s):
                return self._loss(p, Xv, tv)

        res = train_loop(params, None, step, val_fn, self.max_epochs, self.patience, self.min_delta,
                         self.learning_rate)
        self.params_ = res.params
        self.best_epoch_ = res.best_epoch
        self.loss_curve_ = res.train_curve
        self.val_curve_ = res.val_curve
        self.classes_ = np.array([0, 1])
        return self

    def _raw(self, X):
        check_is_fitted(self, "params_")
        out, _ = mlp_forward(self.params_, self.normalizer_.apply(check_array(X, dtype=np.float64)))
        return out

    def predict_proba(self, X):
        p = nn.sigmoid(self._raw(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        if self.kind == "classification":
            return (self.predict_proba(X)[:, 1] >= self.threshold).astype(int)
        return self._raw(X) * self.y_scale_ + self.y_mean_


def train_baseline_bpnn(features, targets, config, fold_of=None):
    """BPNN on PCA scores + demographics with the same CV/early-stopping contract."""
    kind = config.kind
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)

    def make_est(tag, epochs):
        return MLPBaseline(kind, 8, config.learning_rate, epochs, config.patience, config.min_delta,
                           config.pos_weight, config.threshold, _seed_of(config.seed, tag))

    if fold_of is None:
        fold_of = np.arange(len(y)) % config.folds
    est, *_ = cross_validate_then_retrain(make_est, X, y, fold_of, config.folds, kind, config.max_epochs)
    return est


class MeanBaseline(RegressorMixin, BaseEstimator):
    def fit(self, X, y):
        y = np.asarray(y, dtype=np.float64)
        if y.size == 0:
            raise ParameterError("mean baseline needs at least one target")
        self.mean_ = float(y.mean())
        return self

    def predict(self, X):
        check_is_fitted(self, "mean_")
        return np.full(len(X), self.mean_)


def mean_baseline(targets):
    return MeanBaseline().fit(np.zeros((len(targets), 0)), targets)


def run_baselines(records, config):
    """Test-split metrics for LoR/LR, BPNN and (regression) the mean predictor."""
    kind, split, train, test, y_train, y_test, fold_of = _prepare(records, config)
    anth_tr = np.array([anthropometrics(r)[0] for r in train])
    anth_te = np.array([anthropometrics(r)[0] for r in test])
    feat = SequenceFeaturizer(config.n_components).fit(records_to_rows(train))
    T, k = feat.seq_len, config.n_components

    def pca_basic(rs):
        Z = feat.transform(records_to_rows(rs))
        return Z[:, T:]

    out = {}
    if kind == "classification":
        lor = train_baseline_logistic(anth_tr, y_train, config)
        out["LoR"] = _metrics(kind, lor.predict_proba(anth_te)[:, 1], y_test, config.threshold)
    else:
        lr = train_baseline_linear(anth_tr, y_train, config)
        out["LR"] = _metrics(kind, lr.predict(anth_te), y_test, config.threshold)
        out["Average"] = _metrics(kind, mean_baseline(y_train).predict(anth_te), y_test, config.threshold)
    bp = train_baseline_bpnn(pca_basic(train), y_train, config, fold_of)
    bp_out = bp.predict_proba(pca_basic(test))[:, 1] if kind == "classification" else bp.predict(pca_basic(test))
    out["PCA+BPNN"] = _metrics(kind, bp_out, y_test, config.threshold)
    out["_features"] = list(ANTHRO_LABELS)
    return out


# ---------------------------------------------------------------------------
# ablation


ABLATION_COLUMNS = ("MAE", "RMSE", "MAPE", "RMSPE", "Acc(m=10%)")


@dataclass
class AblationTable:
    rows: list  # (variant, {column: value})
    config: TrainConfig

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "columns": list(ABLATION_COLUMNS),
            "rows": [{"variant": v, **m} for v, m in self.rows],
        }

    def to_text(self):
        head = f"{'variant':<12}" + "".join(f"{c:>12}" for c in ABLATION_COLUMNS)
        lines = [head]
        for v, m in self.rows:
            lines.append(f"{v:<12}" + "".join(f"{m[c]:>12.4f}" for c in ABLATION_COLUMNS))
        return "\n".join(lines) + "\n"


def run_ablation(records, config):
    """Train every variant with the same seed and split; regression tasks only."""
    if config.kind != "regression":
        raise ParameterError("the ablation grid is defined for regression tasks")
    rows = []
    reports = {}
    for variant in VARIANTS:
        rep = train_hybrid(records, replace(config, variant=variant))
        reports[variant] = rep
        m = rep.test_metrics
        rows.append(
            (
                variant,
                {
                    "MAE": m["mae"],
                    "RMSE": m["rmse"],
                    "MAPE": m["mape"],
                    "RMSPE": m["rmspe"],
                    "Acc(m=10%)": m["acc_at"]["0.1"],
                },
            )
        )
    table = AblationTable(rows, config)
    table.reports = reports
    return table
