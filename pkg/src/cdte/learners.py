"""Plug-in, IPTW, covariate-adjusted (CA) and orthogonal AU learners for Makarov bounds.

Single-stage learners (``plugin``, ``iptw``) evaluate the Makarov bounds of the
estimated conditional outcome laws directly.  Two-stage learners (``ca``, ``au``)
build a per-row pseudo-outcome surface over the delta (or alpha) grid from
out-of-fold nuisances and regress each grid column on a polynomial basis of the
covariates.  The AU pseudo-outcome adds ``gamma`` times the one-step correction
term to the plug-in value; ``gamma = 0`` recovers the CA learner.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .dist import Dataset, EvalGrid, cell_widths, isotonic_rows
from .makarov import (
    BoundsPair,
    CdfBoundTable,
    QuantileBoundTable,
    cdf_bound_table,
    quantile_bound_table,
)
from .nuisance import (
    DENSITY_FLOOR,
    FoldNuisance,
    NuisanceFit,
    clip_propensity,
    cross_fit,
    fit_cond_cdf,
)

__all__ = [
    "DEFAULT_GAMMA",
    "LearnerConfig",
    "PseudoSurface",
    "WorkingModel",
    "FittedLearner",
    "plugin_bounds",
    "plugin_surface",
    "iptw_weights",
    "iptw_fit",
    "cdf_correction",
    "quantile_correction",
    "correction_term_cdf",
    "correction_term_quantile",
    "pseudo_surface",
    "fit_second_stage",
    "predict_bounds",
    "second_stage_loss",
    "fit_learner",
]

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
Side = Literal["lower", "upper"]
Estimand = Literal["cdf_bounds", "quantile_bounds"]

DEFAULT_GAMMA = {"crps": 0.25, "w2sq": 0.01}
_ROW_CHUNK = 256


@dataclass(frozen=True)
class LearnerConfig:
    """Settings for one learner run.

    ``gamma=None`` picks the default for the loss (0.25 for CRPS, 0.01 for W2^2).
    The CA learner always uses ``gamma = 0``; plug-in and IPTW ignore it.
    """

    eval_grid: EvalGrid
    learner: Literal["plugin", "iptw", "ca", "au"] = "au"
    estimand: Estimand = "cdf_bounds"
    gamma: float | None = None
    K: int = 5
    clip_floor: float = 0.05
    ridge: float = 1e-3
    degree: int = 2
    nuisance_method: Literal["gaussian_loc_scale", "kernel_empirical"] = "kernel_empirical"
    bandwidth: float | None = None
    propensity_l2: float = 1e-3

    def __post_init__(self) -> None:
        if self.learner not in ("plugin", "iptw", "ca", "au"):
            raise ValueError(f"unknown learner {self.learner!r}")
        if self.estimand not in ("cdf_bounds", "quantile_bounds"):
            raise ValueError(f"unknown estimand {self.estimand!r}")
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.degree < 1:
            raise ValueError("feature degree must be at least 1")

    @property
    def loss(self) -> str:
        return "crps" if self.estimand == "cdf_bounds" else "w2sq"

    @property
    def kind(self) -> str:
        return "cdf" if self.estimand == "cdf_bounds" else "quantile"

    @property
    def effective_gamma(self) -> float:
        if self.learner == "ca":
            return 0.0
        return DEFAULT_GAMMA[self.loss] if self.gamma is None else float(self.gamma)

    @property
    def grid(self) -> FloatArray:
        return self.eval_grid.delta_grid if self.kind == "cdf" else self.eval_grid.alpha_grid


# ---------------------------------------------------------------------------
# plug-in tables


def _cdf_table(nuis: FoldNuisance, X: FloatArray, eval_grid: EvalGrid) -> CdfBoundTable:
    y = eval_grid.y_grid
    shifted = y[None, :] - eval_grid.delta_grid[:, None]
    F1 = nuis.cdf1.cdf(X, y[None, :])
    F0s = nuis.cdf0.cdf(X, shifted[None])
    return cdf_bound_table(F1, F0s)


def _quantile_table(nuis: FoldNuisance, X: FloatArray, eval_grid: EvalGrid) -> QuantileBoundTable:
    return quantile_bound_table(
        lambda u: nuis.cdf1.quantile(X, u[None]),
        lambda u: nuis.cdf0.quantile(X, u[None]),
        eval_grid,
    )


def _chunked(n: int):
    for start in range(0, n, _ROW_CHUNK):
        yield slice(start, min(start + _ROW_CHUNK, n))


def plugin_surface(
    nuis: FoldNuisance, X: ArrayLike, eval_grid: EvalGrid, estimand: Estimand = "cdf_bounds"
) -> tuple[FloatArray, FloatArray]:
    """Plug-in lower/upper bounds at every row of ``X`` as ``(m, n_grid)`` arrays."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n_grid = eval_grid.n_delta if estimand == "cdf_bounds" else eval_grid.n_alpha
    lower = np.empty((X.shape[0], n_grid))
    upper = np.empty_like(lower)
    for sl in _chunked(X.shape[0]):
        if estimand == "cdf_bounds":
            t = _cdf_table(nuis, X[sl], eval_grid)
        else:
            t = _quantile_table(nuis, X[sl], eval_grid)
        lower[sl], upper[sl] = t.lower, t.upper
    return lower, upper


def plugin_bounds(
    fit: NuisanceFit,
    x: ArrayLike,
    eval_grid: EvalGrid,
    estimand: Estimand = "cdf_bounds",
    row: int | None = None,
) -> BoundsPair:
    """Makarov bounds of the estimated conditional laws at a single covariate vector.

    ``row`` selects the nuisances of that training row's fold; otherwise the
    all-data fit is used.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    d = _covariate_dim(fit)
    if d is not None and x.size != d:
        raise ValueError(f"x has {x.size} entries, nuisances expect {d}")
    nuis = fit.full if row is None else fit.for_row(row)
    lower, upper = plugin_surface(nuis, x[None, :], eval_grid, estimand)
    grid = eval_grid.delta_grid if estimand == "cdf_bounds" else eval_grid.alpha_grid
    kind = "cdf" if estimand == "cdf_bounds" else "quantile"
    return BoundsPair.from_arrays(grid, lower[0], upper[0], kind)


def _covariate_dim(fit: NuisanceFit) -> int | None:
    w = getattr(fit.full.propensity, "weights", None)
    if w is not None:
        return int(np.size(w) - 1)
    return getattr(fit.full.propensity, "d", None)


# ---------------------------------------------------------------------------
# IPTW


def iptw_weights(a: ArrayLike, pi: ArrayLike, arm: int) -> FloatArray:
    """``1{a == arm} / pi_arm`` with ``pi_arm = pi`` for the treated arm and ``1 - pi`` otherwise."""
    a = np.asarray(a)
    pi = np.asarray(pi, dtype=float)
    pi_arm = pi if arm == 1 else 1.0 - pi
    return (a == arm) / pi_arm


def iptw_fit(data: Dataset, fit: NuisanceFit, bandwidth: float | None = None) -> NuisanceFit:
    """Refit every fold's conditional CDFs as inverse-propensity weighted kernel CDFs.

    Each training row's kernel weight is multiplied by ``1{a_i = a} / pi_a(x_i)``
    using that fold's clipped propensity model.
    """

    def reweight(nuis: FoldNuisance) -> FoldNuisance:
        if nuis.train_rows is None:
            raise ValueError("IPTW refit needs nuisances that record their training rows")
        sub = data.subset(nuis.train_rows)
        pi = nuis.propensity.predict(sub.X, clip=True)
        models = {
            a: fit_cond_cdf(sub, a, "kernel_empirical", bandwidth, sample_weight=iptw_weights(sub.a, pi, a))
            for a in (0, 1)
        }
        return replace(nuis, cdf0=models[0], cdf1=models[1])

    folds = [reweight(f) for f in fit.folds]
    full = folds[0] if fit.plan.K == 1 else reweight(fit.full)
    return NuisanceFit(fit.plan, folds, full)


# ---------------------------------------------------------------------------
# one-step correction terms


def cdf_correction(
    a: ArrayLike,
    y: ArrayLike,
    pi: ArrayLike,
    ystar: ArrayLike,
    delta: ArrayLike,
    f1_star: ArrayLike,
    f0_star: ArrayLike,
    active: ArrayLike,
) -> FloatArray:
    """Correction for a CDF bound given the optimiser ``y*`` and the marginals there.

    ``active`` is the rectifier indicator; ``pi`` must already be clipped.  All
    arguments broadcast; per-row quantities should carry a trailing grid axis.
    """
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    pi = np.asarray(pi, dtype=float)
    ystar = np.asarray(ystar, dtype=float)
    treated = a / pi * ((y <= ystar) - np.asarray(f1_star, dtype=float))
    control = (1.0 - a) / (1.0 - pi) * ((y <= ystar - np.asarray(delta, dtype=float)) - np.asarray(f0_star, dtype=float))
    return np.where(np.asarray(active, dtype=bool), treated - control, 0.0)


def quantile_correction(
    a: ArrayLike,
    y: ArrayLike,
    pi: ArrayLike,
    u1: ArrayLike,
    q1_star: ArrayLike,
    dens1: ArrayLike,
    u0: ArrayLike,
    q0_star: ArrayLike,
    dens0: ArrayLike,
) -> FloatArray:
    """Correction for a quantile bound ``q1(u1) - q0(u0)``.

    Uses the quantile influence function ``(u - 1{Y <= q(u)}) / f(q(u))`` per arm;
    densities are floored at ``DENSITY_FLOOR``.
    """
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    pi = np.asarray(pi, dtype=float)
    d1 = np.maximum(np.asarray(dens1, dtype=float), DENSITY_FLOOR)
    d0 = np.maximum(np.asarray(dens0, dtype=float), DENSITY_FLOOR)
    treated = a / pi * (np.asarray(u1, dtype=float) - (y <= q1_star)) / d1
    control = (1.0 - a) / (1.0 - pi) * (np.asarray(u0, dtype=float) - (y <= q0_star)) / d0
    return treated - control


def _cdf_corrections(
    nuis: FoldNuisance, X: FloatArray, a: FloatArray, y: FloatArray, table: CdfBoundTable,
    eval_grid: EvalGrid, clip_floor: float,
) -> tuple[FloatArray, FloatArray]:
    pi = clip_propensity(nuis.propensity.predict(X, clip=False), clip_floor)[:, None]
    a, y = a[:, None], y[:, None]
    delta = eval_grid.delta_grid[None, :]
    ygrid = eval_grid.y_grid
    lower = cdf_correction(a, y, pi, ygrid[table.arg_sup], delta, table.f1_sup, table.f0_sup, table.sup > 0)
    upper = cdf_correction(a, y, pi, ygrid[table.arg_inf], delta, table.f1_inf, table.f0_inf, table.inf < 0)
    return lower, upper


def _clamp(u: FloatArray, eval_grid: EvalGrid) -> FloatArray:
    return np.clip(u, eval_grid.u_grid[0], eval_grid.u_grid[-1])


def _quantile_corrections(
    nuis: FoldNuisance, X: FloatArray, a: FloatArray, y: FloatArray, table: QuantileBoundTable,
    eval_grid: EvalGrid, clip_floor: float,
) -> tuple[FloatArray, FloatArray]:
    pi = clip_propensity(nuis.propensity.predict(X, clip=False), clip_floor)[:, None]
    a, y = a[:, None], y[:, None]
    alpha = eval_grid.alpha_grid[None, :]
    out = []
    for u_star, shift in ((table.u_lower, 0.0), (table.u_upper, 1.0)):
        u1 = _clamp(u_star, eval_grid)
        u0 = _clamp(u_star - alpha + shift, eval_grid)
        q1 = nuis.cdf1.quantile(X, u1)
        q0 = nuis.cdf0.quantile(X, u0)
        f1 = nuis.cdf1.density(X, q1)
        f0 = nuis.cdf0.density(X, q0)
        out.append(quantile_correction(a, y, pi, u1, q1, f1, u0, q0, f0))
    return out[0], out[1]


def _row_surfaces(
    nuis: FoldNuisance, X: FloatArray, a: FloatArray, y: FloatArray, config: LearnerConfig
) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
    """Plug-in values and correction terms (lower, upper) for rows sharing one nuisance fit."""
    eg = config.eval_grid
    if config.kind == "cdf":
        t = _cdf_table(nuis, X, eg)
        c_lo, c_up = _cdf_corrections(nuis, X, a, y, t, eg, config.clip_floor)
    else:
        t = _quantile_table(nuis, X, eg)
        c_lo, c_up = _quantile_corrections(nuis, X, a, y, t, eg, config.clip_floor)
    return t.lower, t.upper, c_lo, c_up


def correction_term_cdf(
    z: tuple[ArrayLike, int, float],
    delta: float,
    eta: FoldNuisance,
    side: Side,
    y_grid: ArrayLike,
    clip_floor: float = 0.05,
) -> float:
    """Correction term of one observation ``z = (x, a, y)`` for the CDF bound at ``delta``."""
    x, a, y = z
    eg = EvalGrid(np.array([delta - 1.0, delta]), np.array([0.25, 0.75]), y_grid)
    X = np.asarray(x, dtype=float).reshape(1, -1)
    t = _cdf_table(eta, X, eg)
    lo, up = _cdf_corrections(eta, X, np.array([a], float), np.array([y], float), t, eg, clip_floor)
    return float((lo if side == "lower" else up)[0, 1])


def correction_term_quantile(
    z: tuple[ArrayLike, int, float],
    alpha: float,
    eta: FoldNuisance,
    side: Side,
    eval_grid: EvalGrid,
    clip_floor: float = 0.05,
) -> float:
    """Correction term of one observation for the quantile bound at level ``alpha``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    x, a, y = z
    # alpha joins the search grid so the optimiser search matches the batched path
    grid = np.union1d(eval_grid.alpha_grid, [alpha])
    eg = EvalGrid(eval_grid.delta_grid, grid, eval_grid.y_grid, eval_grid.u_grid)
    X = np.asarray(x, dtype=float).reshape(1, -1)
    t = _quantile_table(eta, X, eg)
    lo, up = _quantile_corrections(eta, X, np.array([a], float), np.array([y], float), t, eg, clip_floor)
    j = int(np.searchsorted(grid, alpha))
    return float((lo if side == "lower" else up)[0, j])


# ---------------------------------------------------------------------------
# pseudo-outcome surfaces


@dataclass(frozen=True)
class PseudoSurface:
    """Per-row pseudo-outcomes on the grid: ``values = plugin + gamma * correction``."""

    plugin: FloatArray
    correction: FloatArray
    gamma: float
    side: Side
    kind: str
    grid: FloatArray
    values: FloatArray = field(init=False)

    def __post_init__(self) -> None:
        if self.plugin.shape != self.correction.shape or self.plugin.shape[1] != self.grid.size:
            raise ValueError("surface dimensions do not match the grid")
        values = self.plugin + self.gamma * self.correction if self.gamma else self.plugin.copy()
        if not np.all(np.isfinite(values)):
            raise ValueError("pseudo-outcomes contain non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def invalid_rows(self) -> NDArray[np.bool_]:
        """Rows that are not valid CDFs (cdf kind) or not monotone (quantile kind)."""
        v = self.values
        bad = np.any(np.diff(v, axis=1) < 0, axis=1)
        if self.kind == "cdf":
            bad |= np.any((v < 0) | (v > 1), axis=1)
        return bad


def pseudo_surface(data: Dataset, fit: NuisanceFit, config: LearnerConfig) -> tuple[PseudoSurface, PseudoSurface]:
    """Out-of-fold pseudo-outcomes for the lower and upper bound of every row."""
    n_grid = config.grid.size
    parts = {k: np.empty((data.n, n_grid)) for k in ("pl", "pu", "cl", "cu")}
    plan = fit.plan
    for k in range(plan.K):
        rows = plan.eval_rows(k) if plan.K > 1 else np.arange(data.n)
        nuis = fit.folds[k]
        if nuis.train_rows is not None and plan.K > 1 and np.intersect1d(nuis.train_rows, rows).size:
            raise RuntimeError(f"fold {k} nuisances were trained on rows they are evaluated on")
        for start in range(0, rows.size, _ROW_CHUNK):
            r = rows[start:start + _ROW_CHUNK]
            pl, pu, cl, cu = _row_surfaces(nuis, data.X[r], data.a[r].astype(float), data.y[r], config)
            parts["pl"][r], parts["pu"][r], parts["cl"][r], parts["cu"][r] = pl, pu, cl, cu
    g = config.effective_gamma
    lower = PseudoSurface(parts["pl"], parts["cl"], g, "lower", config.kind, config.grid)
    upper = PseudoSurface(parts["pu"], parts["cu"], g, "upper", config.kind, config.grid)
    return lower, upper


# ---------------------------------------------------------------------------
# second stage


def _poly_terms(d: int, degree: int) -> list[tuple[int, ...]]:
    terms: list[tuple[int, ...]] = []
    for p in range(1, degree + 1):
        terms.extend(combinations_with_replacement(range(d), p))
    return terms


@dataclass(frozen=True)
class WorkingModel:
    """Per-grid-point ridge regressions on a standardised polynomial basis of ``x``."""

    weights: FloatArray  # (n_features, n_grid)
    x_mean: FloatArray
    x_scale: FloatArray
    degree: int
    side: Side
    kind: str
    grid: FloatArray

    def features(self, X: ArrayLike) -> FloatArray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.x_mean.size:
            raise ValueError(f"x has {X.shape[1]} columns, model expects {self.x_mean.size}")
        return _features((X - self.x_mean) / self.x_scale, self.degree)

    def predict_raw(self, X: ArrayLike) -> FloatArray:
        return self.features(X) @ self.weights

    def predict(self, X: ArrayLike) -> FloatArray:
        """Predictions projected onto monotone (and, for CDFs, [0, 1]-valued) functions."""
        return isotonic_rows(self.predict_raw(X), clip=self.kind == "cdf")


def _features(Xs: FloatArray, degree: int) -> FloatArray:
    cols = [np.ones(Xs.shape[0])]
    cols += [np.prod(Xs[:, list(t)], axis=1) for t in _poly_terms(Xs.shape[1], degree)]
    return np.column_stack(cols)


def fit_second_stage(surface: PseudoSurface, covariates: ArrayLike, config: LearnerConfig) -> WorkingModel:
    """Column-wise ridge regression of the pseudo-outcomes on the feature basis.

    The empirical CRPS / W2^2 loss is a weighted sum of per-column squared errors,
    so each grid column is fitted independently.  Training uses the raw
    pseudo-outcomes; projection happens at prediction time.
    """
    X = np.atleast_2d(np.asarray(covariates, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("second stage needs at least one row")
    if X.shape[0] != surface.n:
        raise ValueError(f"{X.shape[0]} covariate rows for a surface of {surface.n} rows")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Phi = _features((X - mean) / scale, config.degree)
    pen = np.full(Phi.shape[1], config.ridge * X.shape[0])
    pen[0] = 0.0
    gram = Phi.T @ Phi + np.diag(pen)
    weights = np.linalg.lstsq(gram, Phi.T @ surface.values, rcond=None)[0]
    return WorkingModel(weights, mean, scale, config.degree, surface.side, surface.kind, surface.grid)


def second_stage_loss(surface: PseudoSurface, model: WorkingModel, covariates: ArrayLike) -> float:
    """Empirical CRPS (cdf kind) or W2^2 (quantile kind) loss of the unprojected model."""
    resid = surface.values - model.predict_raw(covariates)
    w = cell_widths(surface.grid) if surface.kind == "cdf" else cell_widths(surface.grid, 0.0, 1.0)
    return float(np.mean((resid * resid) @ w))


def predict_bounds(
    lower: WorkingModel, upper: WorkingModel, X: ArrayLike
) -> tuple[FloatArray, FloatArray, int]:
    """Evaluate both working models and repair crossings by a pointwise swap.

    Returns ``(lower_values, upper_values, n_crossings)`` with rows per covariate.
    For quantile bounds the lower-side function is the larger one.
    """
    if lower.kind != upper.kind or not np.array_equal(lower.grid, upper.grid):
        raise ValueError("lower and upper working models disagree on kind or grid")
    lo, up = lower.predict(X), upper.predict(X)
    return _uncross(lo, up, lower.kind)


def _uncross(lo: FloatArray, up: FloatArray, kind: str) -> tuple[FloatArray, FloatArray, int]:
    small, large = (lo, up) if kind == "cdf" else (up, lo)
    crossed = small > large
    n_cross = int(crossed.sum())
    small, large = np.minimum(small, large), np.maximum(small, large)
    return (small, large, n_cross) if kind == "cdf" else (large, small, n_cross)


# ---------------------------------------------------------------------------
# end-to-end


@dataclass
class FittedLearner:
    """A trained learner; :meth:`predict` returns bound arrays on the config grid."""

    config: LearnerConfig
    nuisance: NuisanceFit
    lower_model: WorkingModel | None = None
    upper_model: WorkingModel | None = None
    surfaces: tuple[PseudoSurface, PseudoSurface] | None = None

    def predict(self, X: ArrayLike) -> tuple[FloatArray, FloatArray, int]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.lower_model is None:
            lo, up = plugin_surface(self.nuisance.full, X, self.config.eval_grid, self.config.estimand)
            return _uncross(lo, up, self.config.kind)
        return predict_bounds(self.lower_model, self.upper_model, X)

    def predict_pairs(self, X: ArrayLike) -> list[BoundsPair]:
        lo, up, _ = self.predict(X)
        return [BoundsPair.from_arrays(self.config.grid, l, u, self.config.kind) for l, u in zip(lo, up)]


def fit_learner(data: Dataset, config: LearnerConfig, nuisance: NuisanceFit | None = None) -> FittedLearner:
    """Run the configured learner on ``data``.

    ``nuisance`` overrides first-stage estimation (e.g. with the true laws).
    """
    single_stage = config.learner in ("plugin", "iptw")
    if nuisance is None:
        # single-stage learners only use the all-data fit
        _, nuisance = cross_fit(
            data,
            K=1 if single_stage else config.K,
            method=config.nuisance_method,
            l2=config.propensity_l2,
            clip_floor=config.clip_floor,
            bandwidth=config.bandwidth,
        )
    if config.learner == "iptw":
        nuisance = iptw_fit(data, nuisance, config.bandwidth)
    if single_stage:
        return FittedLearner(config, nuisance)
    lower_s, upper_s = pseudo_surface(data, nuisance, config)
    lower_m = fit_second_stage(lower_s, data.X, config)
    upper_m = fit_second_stage(upper_s, data.X, config)
    logger.debug(
        "%s learner: %d/%d invalid pseudo rows (lower/upper)",
        config.learner, lower_s.invalid_rows().sum(), upper_s.invalid_rows().sum(),
    )
    return FittedLearner(config, nuisance, lower_m, upper_m, (lower_s, upper_s))
