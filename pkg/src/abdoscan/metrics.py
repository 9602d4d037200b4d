"""Classification and regression metrics, Mann-Whitney AUC, Bland-Altman agreement
and per-step hidden-state heatmaps."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CapabilityError, ParameterError

LOA_Z = 1.96


@dataclass(frozen=True)
class ClassificationReport:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float | None
    recall: float | None
    specificity: float | None
    f1: float | None
    auc: float | None = None
    auc_p_value: float | None = None

    def to_dict(self):
        return asdict(self)


def _ratio(num, den):
    return num / den if den else None


def confusion_rates(tp, fp, fn, tn):
    """Rates from confusion counts; a rate with a zero denominator is None."""
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return dict(
        accuracy=(tp + tn) / (tp + fp + fn + tn),
        precision=precision,
        recall=recall,
        specificity=_ratio(tn, tn + fp),
        f1=f1,
    )


def _check_binary(labels):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ParameterError("empty input")
    if not np.all((labels == 0) | (labels == 1)):
        raise ParameterError("labels must be 0 or 1")
    return labels.astype(int)


def classification_report(probs, labels, threshold=0.5):
    """Confusion counts at ``threshold`` (positive iff prob >= threshold), rates and AUC."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_binary(labels)
    if probs.shape != labels.shape:
        raise ParameterError("probabilities and labels differ in length")
    pred = probs >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    auc = p = None
    if 0 < pos.sum() < len(labels):
        auc, p = auc_mann_whitney(probs, labels)
    return ClassificationReport(tp, fp, fn, tn, **confusion_rates(tp, fp, fn, tn), auc=auc, auc_p_value=p)


def midranks(x):
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    ties = []
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1
        ties.append(j - i + 1)
        i = j + 1
    return ranks, np.array(ties)


def auc_mann_whitney(scores, labels):
    """ROC AUC as the Mann-Whitney U statistic and its two-sided p-value.

    The p-value uses the normal approximation with tie and continuity
    corrections; it is 1.0 when every score is tied.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    if scores.shape != labels.shape:
        raise ParameterError("scores and labels differ in length")
    n1 = int(labels.sum())
    n2 = len(labels) - n1
    if n1 == 0 or n2 == 0:
        raise ParameterError("AUC needs at least one positive and one negative")
    ranks, ties = midranks(scores)
    u = ranks[labels == 1].sum() - n1 * (n1 + 1) / 2
    auc = u / (n1 * n2)
    n = n1 + n2
    tie_term = float(np.sum(ties**3 - ties)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return float(auc), 1.0
    dev = max(abs(u - n1 * n2 / 2.0) - 0.5, 0.0)
    z = dev / math.sqrt(var)
    return float(auc), float(min(1.0, math.erfc(z / math.sqrt(2))))


@dataclass(frozen=True)
class RegressionReport:
    mae: float
    rmse: float
    mape: float
    rmspe: float
    acc_at: dict = field(default_factory=dict)
    n: int = 0
    n_excluded: int = 0

    def to_dict(self):
        d = asdict(self)
        d["acc_at"] = {str(k): v for k, v in self.acc_at.items()}
        return d


def regression_report(preds, targets, tolerances=(0.10, 0.05)):
    """MAE, RMSE, MAPE and RMSPE (percent) and Acc(m) for each tolerance ``m``.

    Percentage metrics and Acc skip zero targets (counted in ``n_excluded``).
    Acc counts strictly-inside predictions: ``|rel err| < m``.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ParameterError("predictions and targets differ in length")
    keep = targets != 0
    if preds.size == 0 or not keep.any():
        raise ParameterError("no usable (nonzero) targets")
    err = preds - targets
    rel = err[keep] / targets[keep]
    return RegressionReport(
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err**2))),
        mape=float(np.mean(np.abs(rel)) * 100),
        rmspe=float(np.sqrt(np.mean(rel**2)) * 100),
        acc_at={m: float(np.mean(np.abs(rel) < m)) for m in tolerances},
        n=int(preds.size),
        n_excluded=int((~keep).sum()),
    )


@dataclass(frozen=True)
class BlandAltman:
    means: np.ndarray
    diffs: np.ndarray
    mean_diff: float
    sd_diff: float
    lower: float
    upper: float

    def to_dict(self):
        return {
            "means": self.means.tolist(),
            "diffs": self.diffs.tolist(),
            "mean_diff": self.mean_diff,
            "sd_diff": self.sd_diff,
            "lower": self.lower,
            "upper": self.upper,
        }


def bland_altman(a, b):
    """Agreement of ``a`` against ``b``: differences ``a - b`` with 95% limits."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ParameterError("inputs must be 1-D and of equal length")
    if a.size == 0:
        raise ParameterError("empty input")
    diffs = a - b
    md = float(diffs.mean())
    sd = float(diffs.std(ddof=1)) if diffs.size > 1 else 0.0
    return BlandAltman((a + b) / 2, diffs, md, sd, md - LOA_Z * sd, md + LOA_Z * sd)


@dataclass(frozen=True)
class HeatmapMatrix:
    values: np.ndarray  # (2, T); a missing class row is NaN
    counts: tuple
    missing: tuple = ()

    def to_dict(self):
        return {
            "values": [[None if not np.isfinite(v) else float(v) for v in row] for row in self.values],
            "counts": list(self.counts),
            "missing": list(self.missing),
        }


def step_intensity(states):
    """Mean |h| over hidden units at each step; ``states`` is ``(n, T, H)``."""
    return np.abs(states).mean(axis=-1)


def hidden_state_heatmap(model, X, labels):
    """Per-class average of the per-step hidden-state intensity."""
    if model.task_kind != "classification":
        raise CapabilityError("heatmaps are defined for classification models")
    if model.net.arch_.cell is None:
        raise CapabilityError(f"variant {model.variant} has no recurrent stream")
    labels = _check_binary(labels)
    inten = step_intensity(model.hidden_states(X))
    T = inten.shape[1]
    rows, counts, missing = [], [], []
    for c in (0, 1):
        sel = labels == c
        counts.append(int(sel.sum()))
        if sel.any():
            rows.append(inten[sel].mean(axis=0))
        else:
            rows.append(np.full(T, np.nan))
            missing.append(c)
    return HeatmapMatrix(np.vstack(rows), tuple(counts), tuple(missing))
