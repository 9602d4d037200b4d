"""Global shape features (PCA on circumference profiles) and z-score normalizers.

The eigen-decomposition is a cyclic Jacobi solver with round-robin pair
ordering: every round rotates 32 disjoint index pairs at once, so a round is
a single orthogonal similarity transform and the sweep order is fixed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import InsufficientDataError, ParameterError, StateError

SD_FLOOR = 1e-8
JACOBI_TOL = 1e-12
DEMOGRAPHIC_LABELS = ("height_m", "weight_kg", "ga_days")


# ---------------------------------------------------------------------------
# symmetric eigensolver


def _round_robin(n):
    """Pairings of ``range(n)`` (circle method); each round covers disjoint pairs."""
    players = list(range(n)) + ([None] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a is not None and b is not None]
        p, q = (np.array(x, dtype=np.int64) for x in zip(*pairs))
        rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def offdiag_norm(a):
    return float(np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0)))


def jacobi_eigh(a, tol=JACOBI_TOL, max_sweeps=100):
    """Eigenvalues and eigenvectors (columns) of symmetric ``a``, unsorted.

    Iterates until the off-diagonal Frobenius norm drops below ``tol`` (raised
    to a few ulps of ``||a||`` when that is larger, since nothing smaller is
    reachable in floating point).
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ParameterError("matrix must be square")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n == 1:
        return np.diag(a).copy(), v
    stop = max(tol, 4 * np.finfo(float).eps * float(np.linalg.norm(a)))
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        if offdiag_norm(a) < stop:
            break
        for p, q in rounds:
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            active = apq != 0
            safe = np.where(active, apq, 1.0)
            with np.errstate(over="ignore"):
                tau = (aqq - app) / (2 * safe)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1 + tau * tau))
            t = np.where(active, t, 0.0)
            c = 1 / np.sqrt(1 + t * t)
            s = t * c
            j = np.eye(n)
            j[p, p] = c
            j[q, q] = c
            j[p, q] = s
            j[q, p] = -s
            a = j.T @ a @ j
            v = v @ j
    return np.diag(a).copy(), v


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    total_variance: float

    @property
    def k(self):
        return self.components.shape[0]

    def transform(self, seq):
        seq = np.asarray(seq, dtype=np.float64)
        if not np.all(np.isfinite(seq)):
            raise ParameterError("sequence must be finite")
        return (seq - self.mean) @ self.components.T

    def reconstruct(self, scores):
        return self.mean + np.asarray(scores) @ self.components


def _fix_sign(vec):
    i = int(np.argmax(np.abs(vec)))
    return -vec if vec[i] < 0 else vec


def fit_pca(rows, k=3):
    """Fit a centred (unscaled) PCA with ``k`` components on the rows of ``rows``."""
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2:
        raise ParameterError("rows must be a 2-D matrix")
    n, d = x.shape
    if n < 2:
        raise InsufficientDataError(f"PCA needs at least 2 rows, got {n}")
    if not 1 <= k <= min(n - 1, d):
        raise ParameterError(f"component count {k} outside [1, {min(n - 1, d)}]")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / (n - 1)
    evals, evecs = jacobi_eigh(cov)
    evals = np.where(evals < 0, np.where(evals >= -1e-12, 0.0, evals), evals)
    vecs = [_fix_sign(evecs[:, i]) for i in range(d)]
    # eigenvalue descending, ties broken on the first differing entry
    order = sorted(range(d), key=lambda i: (-evals[i], tuple(-vecs[i])))
    total = float(np.trace(cov))
    top = order[:k]
    ev = np.clip(evals[top], 0.0, None)
    ratio = ev / total if total > 0 else np.zeros(k)
    return PcaModel(
        mean=mean,
        components=np.array([vecs[i] for i in top]),
        explained_variance=ev,
        explained_ratio=ratio,
        total_variance=total,
    )


def pca_transform(model, seq):
    return model.transform(seq)


def cumulative_explained(model):
    ratios = model.explained_ratio
    out = np.empty(len(ratios))
    acc = 0.0
    for i, r in enumerate(ratios):
        acc += r
        out[i] = acc
    return out


def components_needed(model, target=0.98):
    """Smallest component count whose cumulative explained ratio reaches ``target``.

    Returns None when even all ``model.k`` components fall short.
    """
    for i, c in enumerate(cumulative_explained(model)):
        if c >= target:
            return i + 1
    return None


# ---------------------------------------------------------------------------
# normalizer


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    scale: np.ndarray
    labels: tuple = ()

    @property
    def floored(self):
        return self.scale <= SD_FLOOR

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != len(self.mean):
            raise ParameterError(f"expected {len(self.mean)} features, got {x.shape[-1]}")
        return x

    def apply(self, x):
        return (self._check(x) - self.mean) / self.scale

    def invert(self, z):
        return self._check(z) * self.scale + self.mean


def fit_normalizer(rows, labels=None):
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < 1:
        raise InsufficientDataError("normalizer needs at least one row")
    labels = tuple(labels) if labels is not None else tuple(f"f{i}" for i in range(d))
    if len(labels) != d:
        raise ParameterError(f"{len(labels)} labels for {d} features")
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    return Normalizer(mean, np.maximum(sd, SD_FLOOR), labels)


def apply_normalizer(norm, vec):
    return norm.apply(vec)


# ---------------------------------------------------------------------------
# estimator front-ends


class CircumferencePCA(TransformerMixin, BaseEstimator):
    """PCA transformer over circumference profiles."""

    def __init__(self, n_components=3):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.model_ = fit_pca(X, self.n_components)
        self.mean_ = self.model_.mean
        self.components_ = self.model_.components
        self.explained_variance_ = self.model_.explained_variance
        self.explained_variance_ratio_ = self.model_.explained_ratio
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.transform(check_array(X, dtype=np.float64))

    def inverse_transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.reconstruct(check_array(X, dtype=np.float64))


class ZScoreScaler(TransformerMixin, BaseEstimator):
    def __init__(self, labels=None):
        self.labels = labels

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.normalizer_ = fit_normalizer(X, self.labels)
        return self

    def transform(self, X):
        check_is_fitted(self, "normalizer_")
        return self.normalizer_.apply(check_array(X, dtype=np.float64))

    def inverse_transform(self, X):
        check_is_fitted(self, "normalizer_")
        return self.normalizer_.invert(check_array(X, dtype=np.float64))


class SequenceFeaturizer(TransformerMixin, BaseEstimator):
    """Turn ``[64 circumferences | height, weight, GA]`` rows into network inputs.

    Output columns are the globally scaled sequence, the z-scored PCA scores and
    the z-scored demographics, in that order. All statistics come from ``fit``.
    """

    def __init__(self, n_components=3, seq_len=64):
        self.n_components = n_components
        self.seq_len = seq_len

    def _split(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.seq_len + len(DEMOGRAPHIC_LABELS):
            raise ParameterError(
                f"expected {self.seq_len + len(DEMOGRAPHIC_LABELS)} columns, got {X.shape[1]}"
            )
        return X[:, : self.seq_len], X[:, self.seq_len :]

    def fit(self, X, y=None):
        seq, basic = self._split(X)
        if len(seq) < 2:
            raise InsufficientDataError("featurizer needs at least 2 rows")
        self.seq_mean_ = float(seq.mean())
        self.seq_scale_ = float(max(seq.std(ddof=1), SD_FLOOR))
        self.pca_ = fit_pca(seq, self.n_components)
        self.pca_scaler_ = fit_normalizer(
            self.pca_.transform(seq), [f"pc{i + 1}" for i in range(self.n_components)]
        )
        self.basic_scaler_ = fit_normalizer(basic, DEMOGRAPHIC_LABELS)
        return self

    def _require_fitted(self):
        if not hasattr(self, "pca_"):
            raise StateError("featurizer is not fitted")

    def transform(self, X):
        self._require_fitted()
        seq, basic = self._split(X)
        return np.hstack(
            [
                (seq - self.seq_mean_) / self.seq_scale_,
                self.pca_scaler_.apply(self.pca_.transform(seq)),
                self.basic_scaler_.apply(basic),
            ]
        )

    def fingerprint(self):
        """SHA-256 over every fitted statistic."""
        self._require_fitted()
        h = hashlib.sha256()
        parts = [
            np.array([self.seq_mean_, self.seq_scale_]),
            self.pca_.mean,
            self.pca_.components,
            self.pca_.explained_variance,
            self.pca_scaler_.mean,
            self.pca_scaler_.scale,
            self.basic_scaler_.mean,
            self.basic_scaler_.scale,
        ]
        for arr in parts:
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()
