"""First-stage nuisance models: propensity score and conditional outcome distributions.

Conditional distribution models share a row-wise query convention: ``X`` is
``(m, d)`` and the query array (outcomes or levels) has a leading axis of size
``m`` (one block per row) or ``1`` (the same block for every row).  The result
has the broadcast shape ``(m, ...)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Literal, Protocol, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit, ndtr, ndtri

from .dist import Dataset

__all__ = [
    "DENSITY_FLOOR",
    "ConditionalDistribution",
    "PropensityModel",
    "GaussianLocScale",
    "KernelEmpirical",
    "FoldNuisance",
    "CrossFitPlan",
    "NuisanceFit",
    "fit_propensity",
    "clip_propensity",
    "fit_cond_cdf",
    "cond_density",
    "cross_fit",
    "scott_bandwidth",
]

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
Method = Literal["gaussian_loc_scale", "kernel_empirical"]

# keeps the quantile correction ratio bounded
DENSITY_FLOOR = 1e-4
_ROW_CHUNK = 256


class ConditionalDistribution(Protocol):
    """What the learners need from an estimated (or true) conditional outcome law."""

    def cdf(self, X: ArrayLike, y: ArrayLike) -> FloatArray: ...

    def quantile(self, X: ArrayLike, u: ArrayLike) -> FloatArray: ...

    def density(self, X: ArrayLike, y: ArrayLike) -> FloatArray: ...


class PropensityLike(Protocol):
    clip_floor: float

    def predict(self, X: ArrayLike, clip: bool = True) -> FloatArray: ...


def _rows(X: ArrayLike) -> FloatArray:
    X = np.asarray(X, dtype=float)
    return X[None, :] if X.ndim == 1 else X


def _row_queries(q: ArrayLike, m: int) -> FloatArray:
    q = np.asarray(q, dtype=float)
    if q.ndim == 0 or q.shape[0] not in (1, m):
        raise ValueError(f"query array needs a leading axis of size 1 or {m}, got shape {q.shape}")
    return q


def _expand(v: FloatArray, ndim: int) -> FloatArray:
    return v.reshape(v.shape + (1,) * (ndim - 1))


# ---------------------------------------------------------------------------
# propensity


def clip_propensity(p: ArrayLike, floor: float = 0.05):
    """Clip propensities into ``[floor, 1 - floor]``."""
    if not 0.0 < floor < 0.5:
        raise ValueError("clip floor must lie in (0, 0.5)")
    out = np.clip(np.asarray(p, dtype=float), floor, 1.0 - floor)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PropensityModel:
    """Logistic propensity model ``P(A = 1 | x)``; ``weights[0]`` is the intercept."""

    weights: FloatArray
    clip_floor: float = 0.05
    converged: bool = True
    objective_path: tuple[float, ...] = ()

    def predict(self, X: ArrayLike, clip: bool = True) -> FloatArray:
        X = _rows(X)
        p = expit(self.weights[0] + X @ self.weights[1:])
        return clip_propensity(p, self.clip_floor) if clip else p


def _logistic_objective(w: FloatArray, Z: FloatArray, a: FloatArray, l2: float) -> float:
    eta = Z @ w
    # mean negative log-likelihood, stable form
    nll = np.mean(np.logaddexp(0.0, eta) - a * eta)
    return float(nll + 0.5 * l2 * np.sum(w[1:] ** 2))


def fit_propensity(
    data: Dataset,
    l2: float = 1e-3,
    clip_floor: float = 0.05,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> PropensityModel:
    """Ridge-penalised logistic regression by iteratively reweighted least squares.

    Newton steps are halved until the penalised objective does not increase, so
    the recorded objective path is nonincreasing.
    """
    if l2 < 0:
        raise ValueError("l2 must be nonnegative")
    a = data.a.astype(float)
    if a.min() == a.max():
        raise ValueError("propensity fit needs both treatment arms")
    n = data.n
    Z = np.column_stack([np.ones(n), data.X])
    penalty = np.full(Z.shape[1], l2)
    penalty[0] = 0.0
    w = np.zeros(Z.shape[1])
    obj = _logistic_objective(w, Z, a, l2)
    path = [obj]
    converged = False
    for _ in range(max_iter):
        p = expit(Z @ w)
        grad = Z.T @ (p - a) / n + penalty * w
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        hess = (Z * (p * (1 - p))[:, None]).T @ Z / n + np.diag(penalty)
        step = np.linalg.solve(hess + 1e-12 * np.eye(hess.shape[0]), grad)
        t = 1.0
        while True:
            w_new = w - t * step
            obj_new = _logistic_objective(w_new, Z, a, l2)
            if obj_new <= obj or t < 1e-10:
                break
            t *= 0.5
        if obj_new > obj:
            break
        w, obj = w_new, obj_new
        path.append(obj)
    else:
        p = expit(Z @ w)
        converged = np.linalg.norm(Z.T @ (p - a) / n + penalty * w) < tol
    if not converged:
        warnings.warn("propensity IRLS did not reach the gradient tolerance", RuntimeWarning, stacklevel=2)
    return PropensityModel(w, clip_floor, bool(converged), tuple(path))


# ---------------------------------------------------------------------------
# conditional outcome distributions


@dataclass(frozen=True)
class GaussianLocScale:
    """``Y | x, a ~ N(b0 + x @ b, scale^2)`` with a constant scale."""

    arm: int
    coef: FloatArray
    scale: float
    method: str = field(default="gaussian_loc_scale", init=False)

    def mean(self, X: ArrayLike) -> FloatArray:
        X = _rows(X)
        return self.coef[0] + X @ self.coef[1:]

    def _z(self, X: ArrayLike, y: ArrayLike) -> FloatArray:
        X = _rows(X)
        y = _row_queries(y, X.shape[0])
        return (y - _expand(self.mean(X), y.ndim)) / self.scale

    def cdf(self, X: ArrayLike, y: ArrayLike) -> FloatArray:
        return ndtr(self._z(X, y))

    def quantile(self, X: ArrayLike, u: ArrayLike) -> FloatArray:
        X = _rows(X)
        u = _row_queries(u, X.shape[0])
        return _expand(self.mean(X), u.ndim) + self.scale * ndtri(u)

    def density(self, X: ArrayLike, y: ArrayLike) -> FloatArray:
        z = self._z(X, y)
        return np.exp(-0.5 * z * z) / (self.scale * np.sqrt(2.0 * np.pi))


def scott_bandwidth(X: ArrayLike) -> FloatArray:
    """Per-dimension Scott's rule ``n^(-1/(d+4)) * sd``."""
    X = _rows(X)
    n, d = X.shape
    sd = X.std(axis=0, ddof=1) if n > 1 else np.ones(d)
    sd = np.where(sd > 0, sd, 1.0)
    return n ** (-1.0 / (d + 4)) * sd


@dataclass(frozen=True)
class KernelEmpirical:
    """Kernel-weighted empirical CDF: ``F(y | x) = sum_i w_i(x) 1{y_i <= y} / sum_i w_i(x)``.

    ``w_i(x) = s_i * exp(-|(x - x_i) / h|^2 / 2)`` with optional per-row sample
    weights ``s_i`` (used by the inverse-propensity weighted variant).
    """

    arm: int
    X_train: FloatArray
    y_sorted: FloatArray
    bandwidth: FloatArray
    sample_weight: FloatArray
    density_step: float
    method: str = field(default="kernel_empirical", init=False)

    def _cum_weights(self, X: FloatArray) -> FloatArray:
        """Normalised cumulative kernel weights, one row per query covariate."""
        diff = (X[:, None, :] - self.X_train[None, :, :]) / self.bandwidth
        logw = -0.5 * np.sum(diff * diff, axis=-1)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw) * self.sample_weight
        cw = np.cumsum(w, axis=1)
        return cw / cw[:, -1:]

    def _chunks(self, X: ArrayLike, q: ArrayLike):
        X = _rows(X)
        q = _row_queries(q, X.shape[0])
        for start in range(0, X.shape[0], _ROW_CHUNK):
            stop = min(start + _ROW_CHUNK, X.shape[0])
            qb = q if q.shape[0] == 1 else q[start:stop]
            yield start, stop, self._cum_weights(X[start:stop]), qb

    def cdf(self, X: ArrayLike, y: ArrayLike) -> FloatArray:
        X = _rows(X)
        q = _row_queries(y, X.shape[0])
        out = np.empty((X.shape[0],) + q.shape[1:])
        for start, stop, cw, qb in self._chunks(X, q):
            idx = np.searchsorted(self.y_sorted, qb, side="right")
            padded = np.concatenate([np.zeros((cw.shape[0], 1)), cw], axis=1)
            idx = np.broadcast_to(idx, (stop - start,) + q.shape[1:]).reshape(stop - start, -1)
            out[start:stop] = np.take_along_axis(padded, idx, axis=1).reshape((stop - start,) + q.shape[1:])
        return np.clip(out, 0.0, 1.0)

    def quantile(self, X: ArrayLike, u: ArrayLike) -> FloatArray:
        X = _rows(X)
        q = _row_queries(u, X.shape[0])
        out = np.empty((X.shape[0],) + q.shape[1:])
        last = self.y_sorted.size - 1
        for start, stop, cw, qb in self._chunks(X, q):
            qb = np.broadcast_to(qb, (stop - start,) + q.shape[1:])
            for r in range(stop - start):
                # smallest training outcome whose cumulative weight reaches u
                idx = np.searchsorted(cw[r], qb[r] - 1e-12, side="left")
                out[start + r] = self.y_sorted[np.minimum(idx, last)]
        return out

    def density(self, X: ArrayLike, y: ArrayLike) -> FloatArray:
        s = self.density_step
        y = np.asarray(y, dtype=float)
        both = np.stack([y + s, y - s], axis=1)
        F = self.cdf(X, both)
        return np.maximum((F[:, 0] - F[:, 1]) / (2.0 * s), DENSITY_FLOOR)


def fit_cond_cdf(
    data: Dataset,
    arm: int,
    method: Method = "kernel_empirical",
    bandwidth: float | ArrayLike | None = None,
    sample_weight: ArrayLike | None = None,
    density_step: float | None = None,
    min_rows: int = 10,
):
    """Fit ``F_a(y | x)`` on the rows of ``data`` with treatment ``arm``.

    ``sample_weight`` (one entry per row of ``data``) only affects the kernel model.
    """
    mask = data.a == arm
    if mask.sum() < min_rows:
        raise ValueError(f"arm {arm} has {int(mask.sum())} rows; need at least {min_rows}")
    X, y = data.X[mask], data.y[mask]
    if method == "gaussian_loc_scale":
        Z = np.column_stack([np.ones(X.shape[0]), X])
        coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
        resid = y - Z @ coef
        scale = float(np.sqrt(np.sum(resid**2) / max(y.size - Z.shape[1], 1)))
        return GaussianLocScale(arm, coef, max(scale, 1e-8))
    if method != "kernel_empirical":
        raise ValueError(f"unknown conditional CDF method {method!r}")
    h = scott_bandwidth(X) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, dtype=float), (X.shape[1],)).copy()
    if np.any(h <= 0):
        raise ValueError("kernel bandwidth must be positive")
    sw = np.ones(X.shape[0]) if sample_weight is None else np.asarray(sample_weight, dtype=float)[mask]
    if np.any(sw < 0) or sw.sum() <= 0:
        raise ValueError("sample weights must be nonnegative with positive total")
    order = np.argsort(y, kind="stable")
    step = float(np.exp(np.mean(np.log(h)))) / 4.0 if density_step is None else density_step
    return KernelEmpirical(arm, X[order], y[order], h, sw[order], step)


def cond_density(model: ConditionalDistribution, y: ArrayLike, x: ArrayLike) -> FloatArray | float:
    """Conditional density of the outcome at ``y`` for a single covariate vector ``x``."""
    y = np.asarray(y, dtype=float)
    out = model.density(np.asarray(x, dtype=float)[None, :], y[None, ...] if y.ndim else y.reshape(1))
    out = out[0]
    return float(out) if y.ndim == 0 else out


# ---------------------------------------------------------------------------
# cross-fitting


@dataclass(frozen=True)
class CrossFitPlan:
    """Row ``i`` belongs to fold ``i mod K``; ``K == 1`` means no sample splitting."""

    K: int
    n: int

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.n < self.K:
            raise ValueError(f"{self.n} rows cannot fill {self.K} folds")

    @property
    def assignment(self) -> NDArray[np.int64]:
        return np.arange(self.n) % self.K

    def eval_rows(self, k: int) -> NDArray[np.int64]:
        return np.flatnonzero(self.assignment == k)

    def train_rows(self, k: int) -> NDArray[np.int64]:
        if self.K == 1:
            return np.arange(self.n)
        return np.flatnonzero(self.assignment != k)


@dataclass(frozen=True)
class FoldNuisance:
    """Propensity model and the two conditional outcome laws for one fold."""

    propensity: PropensityLike
    cdf0: ConditionalDistribution
    cdf1: ConditionalDistribution
    train_rows: NDArray[np.int64] | None = None

    def arm(self, a: int) -> ConditionalDistribution:
        return self.cdf1 if a == 1 else self.cdf0


@dataclass(frozen=True)
class NuisanceFit:
    """Per-fold nuisances plus a fit on all rows used for new query points."""

    plan: CrossFitPlan
    folds: Sequence[FoldNuisance]
    full: FoldNuisance

    def for_row(self, i: int) -> FoldNuisance:
        return self.folds[int(self.plan.assignment[i])]

    @classmethod
    def shared(cls, n: int, nuisance: FoldNuisance) -> "NuisanceFit":
        """The same nuisances for every row (oracle or externally fitted models)."""
        return cls(CrossFitPlan(1, n), [nuisance], nuisance)


def _fit_fold(
    data: Dataset,
    rows: NDArray[np.int64],
    method: Method,
    l2: float,
    clip_floor: float,
    bandwidth: float | ArrayLike | None,
    label: str,
) -> FoldNuisance:
    sub = data.subset(rows)
    for a in (0, 1):
        if not np.any(sub.a == a):
            raise ValueError(f"{label}: training rows contain no treatment arm {a}")
    return FoldNuisance(
        propensity=fit_propensity(sub, l2=l2, clip_floor=clip_floor),
        cdf0=fit_cond_cdf(sub, 0, method, bandwidth),
        cdf1=fit_cond_cdf(sub, 1, method, bandwidth),
        train_rows=rows,
    )


def cross_fit(
    data: Dataset,
    K: int = 5,
    method: Method = "kernel_empirical",
    l2: float = 1e-3,
    clip_floor: float = 0.05,
    bandwidth: float | ArrayLike | None = None,
) -> tuple[CrossFitPlan, NuisanceFit]:
    """Fit the nuisances of fold ``k`` on every row outside fold ``k``."""
    plan = CrossFitPlan(K, data.n)
    all_rows = np.arange(data.n)
    full = _fit_fold(data, all_rows, method, l2, clip_floor, bandwidth, "full data")
    if K == 1:
        return plan, NuisanceFit(plan, [full], full)
    folds = [
        _fit_fold(data, plan.train_rows(k), method, l2, clip_floor, bandwidth, f"fold {k}")
        for k in range(K)
    ]
    logger.debug("cross-fitted %d folds on %d rows", K, data.n)
    return plan, NuisanceFit(plan, folds, full)
