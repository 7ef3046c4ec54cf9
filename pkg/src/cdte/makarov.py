"""Makarov bounds on the CDF and quantiles of the treatment effect ``Y[1] - Y[0]``.

The continuous-outcome bounds are rectified sup/inf convolutions of the two
marginal CDFs (or quantile functions) searched over a finite candidate grid.
Batched versions (:func:`cdf_bound_table`, :func:`quantile_bound_table`) work on
many covariate rows at once and also return the optimisers, which the one-step
correction terms reuse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import ndtr, ndtri

from .dist import EvalGrid, GridCdf, GridQuantile

__all__ = [
    "ARG_TOL",
    "ArgOpt",
    "BoundsPair",
    "DiscreteDist",
    "sup_convolution",
    "inf_convolution",
    "cdf_bounds",
    "quantile_bounds",
    "cdf_bounds_mixed",
    "fna_bounds",
    "analytic_normal_bounds",
    "analytic_normal_quantile_bounds",
    "cdf_bound_table",
    "quantile_bound_table",
    "quantile_levels",
]

FloatArray = NDArray[np.float64]
Fn = Callable[[FloatArray], FloatArray]

# optimisers within this distance of the optimum count as ties
ARG_TOL = 1e-9


@dataclass(frozen=True)
class ArgOpt:
    """Optimal value of a convolution together with every optimiser on the candidate set."""

    opt_value: float
    arg_set: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.arg_set:
            raise ValueError("arg_set must be nonempty")
        if list(self.arg_set) != sorted(self.arg_set):
            raise ValueError("arg_set must be ascending")

    @property
    def arg(self) -> float:
        """Smallest optimiser (tie-breaking convention)."""
        return self.arg_set[0]


@dataclass(frozen=True)
class DiscreteDist:
    """Finitely supported distribution with strictly positive masses."""

    support: FloatArray
    pmf: FloatArray

    def __post_init__(self) -> None:
        support = np.asarray(self.support, dtype=float).reshape(-1)
        pmf = np.asarray(self.pmf, dtype=float).reshape(-1)
        if support.size == 0 or support.shape != pmf.shape:
            raise ValueError("support and pmf must be nonempty and of equal length")
        if np.any(np.diff(support) <= 0):
            raise ValueError("support must be strictly ascending")
        if np.any(pmf <= 0):
            raise ValueError("pmf entries must be positive")
        if abs(pmf.sum() - 1.0) > 1e-12:
            raise ValueError(f"pmf sums to {pmf.sum()!r}, not 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "pmf", pmf)

    @classmethod
    def bernoulli(cls, p: float) -> "DiscreteDist":
        """Bernoulli law on {0, 1}; zero-mass atoms are dropped."""
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        atoms = [(s, m) for s, m in ((0.0, 1.0 - p), (1.0, p)) if m > 0]
        return cls([s for s, _ in atoms], [m for _, m in atoms])

    def cdf(self, y: ArrayLike) -> FloatArray:
        """``P(Y <= y)``."""
        idx = np.searchsorted(self.support, np.asarray(y, dtype=float), side="right")
        return np.concatenate(([0.0], np.cumsum(self.pmf)))[idx]

    def cdf_left(self, y: ArrayLike) -> FloatArray:
        """``P(Y < y)``."""
        idx = np.searchsorted(self.support, np.asarray(y, dtype=float), side="left")
        return np.concatenate(([0.0], np.cumsum(self.pmf)))[idx]


@dataclass(frozen=True)
class BoundsPair:
    """Lower/upper Makarov bound functions at one covariate value.

    For ``kind == "cdf"`` both members are :class:`GridCdf` on the delta grid and
    ``lower <= upper``.  For ``kind == "quantile"`` both are :class:`GridQuantile`
    on the alpha grid; ``lower`` holds the inverse of the lower CDF bound, which is
    the *larger* quantile, so ``upper <= lower`` pointwise.
    """

    lower: GridCdf | GridQuantile
    upper: GridCdf | GridQuantile
    kind: Literal["cdf", "quantile"] = "cdf"

    def __post_init__(self) -> None:
        if self.kind == "cdf":
            if not (isinstance(self.lower, GridCdf) and isinstance(self.upper, GridCdf)):
                raise TypeError("cdf bounds need GridCdf members")
            if not np.array_equal(self.lower.grid, self.upper.grid):
                raise ValueError("lower and upper bounds live on different grids")
            if np.any(self.lower.probs > self.upper.probs + 1e-12):
                raise ValueError("lower CDF bound exceeds the upper bound")
        elif self.kind == "quantile":
            if not (isinstance(self.lower, GridQuantile) and isinstance(self.upper, GridQuantile)):
                raise TypeError("quantile bounds need GridQuantile members")
            if not np.array_equal(self.lower.levels, self.upper.levels):
                raise ValueError("lower and upper bounds live on different level grids")
            if np.any(self.upper.values > self.lower.values + 1e-12):
                raise ValueError("quantile bounds out of order (need upper <= lower)")
        else:
            raise ValueError(f"unknown bound kind {self.kind!r}")

    @property
    def grid(self) -> FloatArray:
        return self.lower.grid if self.kind == "cdf" else self.lower.levels

    @property
    def lower_values(self) -> FloatArray:
        return self.lower.probs if self.kind == "cdf" else self.lower.values

    @property
    def upper_values(self) -> FloatArray:
        return self.upper.probs if self.kind == "cdf" else self.upper.values

    @classmethod
    def from_arrays(cls, grid: ArrayLike, lower: ArrayLike, upper: ArrayLike, kind: str = "cdf") -> "BoundsPair":
        if kind == "cdf":
            return cls(GridCdf(grid, lower), GridCdf(grid, upper), "cdf")
        return cls(GridQuantile(grid, lower), GridQuantile(grid, upper), "quantile")


# ---------------------------------------------------------------------------
# shared search kernel


def _first_within(values: FloatArray, best: FloatArray, maximize: bool) -> NDArray[np.intp]:
    """Index of the first entry within ARG_TOL of ``best`` along the last axis."""
    if maximize:
        hit = values >= best[..., None] - ARG_TOL
    else:
        hit = values <= best[..., None] + ARG_TOL
    return np.argmax(hit, axis=-1)


def _extremum(values: FloatArray, maximize: bool) -> tuple[FloatArray, NDArray[np.intp]]:
    best = values.max(axis=-1) if maximize else values.min(axis=-1)
    return best, _first_within(values, best, maximize)


def _convolution(f1: Fn, f0: Fn, delta: float, candidates: ArrayLike, maximize: bool) -> ArgOpt:
    c = np.unique(np.asarray(candidates, dtype=float).reshape(-1))
    if c.size == 0:
        raise ValueError("candidate set is empty")
    h = np.asarray(f1(c), dtype=float) - np.asarray(f0(c - delta), dtype=float)
    best = h.max() if maximize else h.min()
    ties = h >= best - ARG_TOL if maximize else h <= best + ARG_TOL
    return ArgOpt(float(best), tuple(float(v) for v in c[ties]))


def sup_convolution(f1: Fn, f0: Fn, delta: float, candidates: ArrayLike) -> ArgOpt:
    """``max_y {f1(y) - f0(y - delta)}`` over ``candidates`` with all maximisers."""
    return _convolution(f1, f0, delta, candidates, maximize=True)


def inf_convolution(f1: Fn, f0: Fn, delta: float, candidates: ArrayLike) -> ArgOpt:
    """``min_y {f1(y) - f0(y - delta)}`` over ``candidates`` with all minimisers."""
    return _convolution(f1, f0, delta, candidates, maximize=False)


# ---------------------------------------------------------------------------
# CDF bounds


@dataclass(frozen=True)
class CdfBoundTable:
    """Batched sup/inf convolutions for ``m`` rows on an ``n_delta`` grid.

    ``sup``/``inf`` hold the unrectified convolution values, ``arg_sup``/``arg_inf``
    the index into the candidate grid of the smallest optimiser, and ``f1_*``/``f0_*``
    the marginal CDF values at the optimisers (``y*`` and ``y* - delta``).
    """

    sup: FloatArray
    inf: FloatArray
    arg_sup: NDArray[np.intp]
    arg_inf: NDArray[np.intp]
    f1_sup: FloatArray
    f0_sup: FloatArray
    f1_inf: FloatArray
    f0_inf: FloatArray

    @property
    def lower(self) -> FloatArray:
        return np.maximum(self.sup, 0.0)

    @property
    def upper(self) -> FloatArray:
        return 1.0 + np.minimum(self.inf, 0.0)


def cdf_bound_table(F1: ArrayLike, F0_shifted: ArrayLike) -> CdfBoundTable:
    """Makarov CDF bounds from tabulated marginals.

    Args:
        F1: ``(m, k)`` values ``F1(y_l | x_i)`` on the candidate grid.
        F0_shifted: ``(m, n_delta, k)`` values ``F0(y_l - delta_j | x_i)``.
    """
    F1 = np.asarray(F1, dtype=float)
    F0s = np.asarray(F0_shifted, dtype=float)
    if F1.ndim == 1:
        F1, F0s = F1[None], F0s[None]
    h = F1[:, None, :] - F0s
    sup, arg_sup = _extremum(h, maximize=True)
    inf, arg_inf = _extremum(h, maximize=False)
    rows = np.arange(F1.shape[0])[:, None]
    cols = np.arange(F0s.shape[1])[None, :]
    return CdfBoundTable(
        sup=sup,
        inf=inf,
        arg_sup=arg_sup,
        arg_inf=arg_inf,
        f1_sup=F1[rows, arg_sup],
        f0_sup=F0s[rows, cols, arg_sup],
        f1_inf=F1[rows, arg_inf],
        f0_inf=F0s[rows, cols, arg_inf],
    )


def cdf_bounds(f1: Fn, f0: Fn, eval_grid: EvalGrid) -> BoundsPair:
    """Pointwise-sharp bounds on ``P(Y[1] - Y[0] <= delta)`` over the delta grid."""
    y = eval_grid.y_grid
    table = cdf_bound_table(
        np.asarray(f1(y), dtype=float),
        np.asarray(f0(y[None, :] - eval_grid.delta_grid[:, None]), dtype=float),
    )
    return BoundsPair.from_arrays(eval_grid.delta_grid, table.lower[0], table.upper[0], "cdf")


# ---------------------------------------------------------------------------
# quantile bounds


def quantile_levels(eval_grid: EvalGrid) -> FloatArray:
    """Candidate levels for the quantile search: u-grid, alpha-grid and both endpoints."""
    return np.unique(np.concatenate(([0.0, 1.0], eval_grid.u_grid, eval_grid.alpha_grid)))


@dataclass(frozen=True)
class QuantileBoundTable:
    """Batched quantile bounds for ``m`` rows on an ``n_alpha`` grid.

    ``lower`` is the inverse of the lower CDF bound (an inf over ``[alpha, 1]``) and
    ``upper`` the inverse of the upper CDF bound (a sup over ``[0, alpha]``).
    ``u_lower``/``u_upper`` are the smallest optimising levels.
    """

    lower: FloatArray
    upper: FloatArray
    u_lower: FloatArray
    u_upper: FloatArray


def _clamp_levels(u: ArrayLike, eval_grid: EvalGrid) -> FloatArray:
    # grid extremes stand in for the unrepresentable 0/1 quantiles
    return np.clip(u, eval_grid.u_grid[0], eval_grid.u_grid[-1])


def quantile_bound_table(
    q1: Callable[[FloatArray], FloatArray],
    q0: Callable[[FloatArray], FloatArray],
    eval_grid: EvalGrid,
) -> QuantileBoundTable:
    """Makarov quantile bounds for quantile functions that map level arrays row-wise.

    ``q1(u)`` receives levels of shape ``(L,)`` and ``q0(u)`` levels of shape
    ``(n_alpha, L)``; both return arrays with a leading row axis of size ``m``
    (or no row axis for a single covariate value).
    """
    levels = quantile_levels(eval_grid)
    alpha = eval_grid.alpha_grid[:, None]
    Q1 = np.asarray(q1(_clamp_levels(levels, eval_grid)), dtype=float)
    single = Q1.ndim == 1
    if single:
        Q1 = Q1[None]

    def search(shift: FloatArray, mask: NDArray[np.bool_], maximize: bool):
        Q0 = np.asarray(q0(_clamp_levels(shift, eval_grid)), dtype=float)
        if single:
            Q0 = Q0[None]
        h = Q1[:, None, :] - Q0
        if np.any(mask.sum(axis=-1) < 2):
            raise ValueError("fewer than two candidate levels in a search interval")
        fill = -np.inf if maximize else np.inf
        h = np.where(mask[None], h, fill)
        best, idx = _extremum(h, maximize)
        return best, levels[idx]

    lo_mask = levels[None, :] >= alpha
    hi_mask = levels[None, :] <= alpha
    lower, u_lo = search(np.where(lo_mask, levels - alpha, 0.0), lo_mask, maximize=False)
    upper, u_hi = search(np.where(hi_mask, levels - alpha + 1.0, 1.0), hi_mask, maximize=True)
    return QuantileBoundTable(lower, upper, u_lo, u_hi)


def quantile_bounds(q1: Fn, q0: Fn, eval_grid: EvalGrid) -> BoundsPair:
    """Pointwise-sharp bounds on the quantiles of ``Y[1] - Y[0]`` over the alpha grid."""
    table = quantile_bound_table(q1, q0, eval_grid)
    return BoundsPair.from_arrays(eval_grid.alpha_grid, table.lower[0], table.upper[0], "quantile")


# ---------------------------------------------------------------------------
# discrete / binary outcomes and the normal closed form


def cdf_bounds_mixed(d1: DiscreteDist, d0: DiscreteDist, delta: float) -> tuple[float, float]:
    """Sharp bounds on ``P(Y[1] - Y[0] <= delta)`` for discrete marginals.

    The objective ``F1(y) - P(Y0 < y - delta)`` is piecewise constant with jumps at
    ``support(d1)`` and ``support(d0) + delta``. Its supremum is attained at one of
    those points; its infimum is the right limit there, ``F1(y) - F0(y - delta)``.
    """
    cand = np.union1d(d1.support, d0.support + delta)
    f1 = d1.cdf(cand)
    sup = float(np.max(f1 - d0.cdf_left(cand - delta)))
    inf = float(np.min(f1 - d0.cdf(cand - delta)))
    return max(0.0, sup), 1.0 + min(0.0, inf)


def fna_bounds(mu0: ArrayLike, mu1: ArrayLike) -> tuple[float, float]:
    """Sharp bounds on the fraction negatively affected for a binary outcome.

    ``mu0``/``mu1`` are per-row success probabilities under control/treatment.
    """
    m0 = np.asarray(mu0, dtype=float).reshape(-1)
    m1 = np.asarray(mu1, dtype=float).reshape(-1)
    if m0.shape != m1.shape or m0.size == 0:
        raise ValueError("mu0 and mu1 must be nonempty and of equal length")
    if np.any((m0 < 0) | (m0 > 1) | (m1 < 0) | (m1 > 1)):
        raise ValueError("success probabilities must lie in [0, 1]")
    lower = float(np.mean(np.maximum(0.0, m0 - m1)))
    upper = float(np.mean(np.minimum(m0, 1.0 - m1)))
    return lower, upper


def analytic_normal_bounds(mu1: ArrayLike, mu0: ArrayLike, sigma: float, delta: ArrayLike):
    """Closed-form bounds for ``Y[a] ~ N(mu_a, sigma^2)`` with a common ``sigma``.

    Both bounds are half-normal CDFs centred at ``tau = mu1 - mu0``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    tau = np.asarray(mu1, dtype=float) - np.asarray(mu0, dtype=float)
    s = 2.0 * ndtr((np.asarray(delta, dtype=float) - tau) / (2.0 * sigma)) - 1.0
    lower, upper = np.maximum(0.0, s), np.minimum(1.0, 1.0 + s)
    if np.ndim(lower) == 0:
        return float(lower), float(upper)
    return lower, upper


def analytic_normal_quantile_bounds(mu1: ArrayLike, mu0: ArrayLike, sigma: float, alpha: ArrayLike):
    """Inverses of :func:`analytic_normal_bounds`: ``(lower, upper)`` with ``upper <= lower``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    tau = np.asarray(mu1, dtype=float) - np.asarray(mu0, dtype=float)
    a = np.asarray(alpha, dtype=float)
    lower = tau + 2.0 * sigma * ndtri((1.0 + a) / 2.0)
    upper = tau + 2.0 * sigma * ndtri(a / 2.0)
    return lower, upper
