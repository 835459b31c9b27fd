"""Nonparametric conditional-mean estimators and the residual-variance plug-in.

Every fitted regressor clamps its predictions to the range of the training
response, so a bounded regression function always yields a bounded estimate
regardless of bandwidth or query location.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .data import Dataset

KINDS = ("kernel_smoother", "knn", "additive_backfit")

# rows per weight block chosen so each block (~2 MB) stays cache-resident
_CHUNK_CELLS = 262144
_WEIGHT_FLOOR = 1e-300


class RegressionError(ValueError):
    pass


@dataclass(frozen=True)
class RegressorSpec:
    kind: str = "kernel_smoother"
    bandwidth_scale: float = 1.0
    k: int | str = "auto"
    max_sweeps: int = 20
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regressor kind {self.kind!r}; choose from {KINDS}")
        if not self.bandwidth_scale > 0:
            raise ValueError("bandwidth_scale must be positive")
        if self.k != "auto" and (int(self.k) != self.k or int(self.k) < 1):
            raise ValueError("k must be a positive integer or 'auto'")
        if int(self.max_sweeps) < 1 or not self.tolerance > 0:
            raise ValueError("max_sweeps and tolerance must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RegressorSpec":
        d = dict(d)
        if "k" in d and d["k"] != "auto":
            d["k"] = int(d["k"])
        for key in ("bandwidth_scale", "tolerance"):
            if key in d:
                d[key] = float(d[key])
        if "max_sweeps" in d:
            d["max_sweeps"] = int(d["max_sweeps"])
        return cls(**d)


def bandwidths(X: np.ndarray, scale: float) -> np.ndarray:
    """Per-column ``c * sd * n^(-1/(2+p))``; zero-variance columns get 1.0."""
    n, p = X.shape
    sd = X.std(axis=0, ddof=1) if n > 1 else np.zeros(p)
    h = scale * sd * n ** (-1.0 / (2 + p))
    h[~(sd > 0)] = 1.0
    return h


def _gauss_weights(Q: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Unnormalised product-Gaussian weights between query and training rows
    (both already divided by the bandwidths)."""
    return np.exp(-0.5 * cdist(Q, X, "sqeuclidean"))


def _row_chunks(m: int, n: int):
    step = max(1, _CHUNK_CELLS // max(n, 1))
    for start in range(0, m, step):
        yield slice(start, min(m, start + step))


class FittedRegressor:
    """Base class. Subclasses implement ``_raw_predict``."""

    kind = "base"

    def __init__(self, p: int, y: np.ndarray):
        self.p = p
        self.y_min = float(np.min(y))
        self.y_max = float(np.max(y))
        self.y_mean = float(np.mean(y))

    def predict(self, Xq) -> np.ndarray:
        Xq = np.asarray(Xq, dtype=float)
        if Xq.ndim == 1:
            Xq = Xq.reshape(-1, 1) if self.p == 1 else Xq.reshape(1, -1)
        if Xq.shape[1] != self.p:
            raise RegressionError(f"query has {Xq.shape[1]} columns, fitted on {self.p}")
        out = self._raw_predict(Xq)
        return np.clip(out, self.y_min, self.y_max)

    def _raw_predict(self, Xq: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError


class KernelSmoother(FittedRegressor):
    """Nadaraya-Watson estimator with a product Gaussian kernel."""

    kind = "kernel_smoother"

    def __init__(self, X: np.ndarray, y: np.ndarray, scale: float):
        super().__init__(X.shape[1], y)
        self.h = bandwidths(X, scale)
        self._Xs = X / self.h
        self._y = y.copy()

    def _raw_predict(self, Xq):
        Qs = Xq / self.h
        out = np.empty(Xq.shape[0])
        for sl in _row_chunks(Xq.shape[0], self._Xs.shape[0]):
            W = _gauss_weights(Qs[sl], self._Xs)
            tot = W.sum(axis=1)
            ok = tot >= _WEIGHT_FLOOR
            num = W @ self._y
            out[sl] = np.where(ok, num / np.where(ok, tot, 1.0), self.y_mean)
        return out


class KnnRegressor(FittedRegressor):
    """Mean response of the ``k`` nearest training rows (Euclidean)."""

    kind = "knn"

    def __init__(self, X: np.ndarray, y: np.ndarray, k):
        super().__init__(X.shape[1], y)
        n, p = X.shape
        if k == "auto":
            k = math.ceil(n ** (2.0 / (2 + p)))
        self.k = int(min(max(int(k), 1), n))
        self._X = X.copy()
        self._y = y.copy()

    def _raw_predict(self, Xq):
        out = np.empty(Xq.shape[0])
        for sl in _row_chunks(Xq.shape[0], self._X.shape[0]):
            D = cdist(Xq[sl], self._X, "sqeuclidean")
            # stable sort: equal distances resolved by training row index
            idx = np.argsort(D, axis=1, kind="stable")[:, : self.k]
            out[sl] = self._y[idx].mean(axis=1)
        return out


class AdditiveBackfit(FittedRegressor):
    """Additive model ``a + sum_m f_m(x_m)`` fitted by backfitting 1-D
    Nadaraya-Watson smoothers."""

    kind = "additive_backfit"

    def __init__(self, X, y, scale: float, max_sweeps: int, tol: float):
        super().__init__(X.shape[1], y)
        n, p = X.shape
        # each component is a 1-D smoother, so it gets the p=1 rate
        self.h = np.array([bandwidths(X[:, [m]], scale)[0] for m in range(p)])
        self._X = X.copy()
        self.alpha = float(y.mean())
        S = []
        for m in range(p):
            xs = X[:, m] / self.h[m]
            W = _gauss_weights(xs[:, None], xs[:, None])
            S.append(W / W.sum(axis=1, keepdims=True))
        f = np.zeros((p, n))
        resid = np.zeros((p, n))
        centre = np.zeros(p)
        self.sweeps = 0
        self.converged = False
        for sweep in range(int(max_sweeps)):
            change = 0.0
            for m in range(p):
                r = y - self.alpha - f.sum(axis=0) + f[m]
                g = S[m] @ r
                c = g.mean()
                g -= c
                change = max(change, float(np.max(np.abs(g - f[m]))))
                f[m], resid[m], centre[m] = g, r, c
            self.sweeps = sweep + 1
            if change < tol:
                self.converged = True
                break
        self._resid = resid
        self._centre = centre
        self.components_ = f

    def _raw_predict(self, Xq):
        out = np.full(Xq.shape[0], self.alpha)
        for m in range(self.p):
            xs = self._X[:, m] / self.h[m]
            qs = Xq[:, m] / self.h[m]
            for sl in _row_chunks(Xq.shape[0], xs.shape[0]):
                W = _gauss_weights(qs[sl, None], xs[:, None])
                tot = W.sum(axis=1)
                ok = tot >= _WEIGHT_FLOOR
                g = (W @ self._resid[m]) / np.where(ok, tot, 1.0) - self._centre[m]
                out[sl] += np.where(ok, g, 0.0)
        return out


def fit(spec: RegressorSpec, X, y) -> FittedRegressor:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if n < 2:
        raise RegressionError(f"need at least 2 rows to fit, got {n}")
    if p < 1:
        raise RegressionError("need at least one predictor")
    if y.shape[0] != n:
        raise RegressionError(f"X has {n} rows but y has {y.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise RegressionError("non-finite training data")
    if spec.kind == "kernel_smoother":
        return KernelSmoother(X, y, spec.bandwidth_scale)
    if spec.kind == "knn":
        return KnnRegressor(X, y, spec.k)
    return AdditiveBackfit(X, y, spec.bandwidth_scale, spec.max_sweeps, spec.tolerance)


def predict(fr: FittedRegressor, Xq) -> np.ndarray:
    return fr.predict(Xq)


@dataclass(frozen=True)
class ResidualVarianceEstimate:
    value: float
    target: int
    cond: tuple
    spec: RegressorSpec | None
    n_fit: int
    n_eval: int

    @property
    def reported(self) -> float:
        """Value clamped at zero, for display only."""
        return max(self.value, 0.0)


def plugin_value(fr: FittedRegressor, X_eval, y_eval, centered: bool = False) -> float:
    """Uncentered plug-in ``mean(y^2) - mean(f(X)^2)`` on evaluation rows.

    With ``centered=True`` returns ``mean((y - f(X))^2)`` instead.
    """
    y_eval = np.asarray(y_eval, dtype=float)
    fx = fr.predict(X_eval)
    if centered:
        return float(np.mean((y_eval - fx) ** 2))
    return float(np.mean(y_eval**2) - np.mean(fx**2))


def residual_variance_plugin(
    spec: RegressorSpec,
    fit_half: Dataset,
    eval_half: Dataset,
    target: int,
    cond: Sequence[int],
    centered: bool = False,
) -> ResidualVarianceEstimate:
    cond = tuple(int(c) for c in cond)
    if not cond:
        raise RegressionError("empty conditioning set; use marginal_variance")
    if target in cond:
        raise RegressionError(f"target {target} is in the conditioning set")
    if fit_half.n < 1 or eval_half.n < 1:
        raise RegressionError("both halves must be non-empty")
    fr = fit(spec, fit_half.columns(cond), fit_half.column(target))
    value = plugin_value(fr, eval_half.columns(cond), eval_half.column(target), centered)
    if not math.isfinite(value):
        raise RegressionError(f"non-finite residual variance for node {target}")
    return ResidualVarianceEstimate(value, target, cond, spec, fit_half.n, eval_half.n)


def marginal_variance(ds: Dataset, node: int) -> float:
    if ds.n < 2:
        raise RegressionError("need at least 2 rows for a variance")
    return float(np.var(ds.column(node), ddof=1))
