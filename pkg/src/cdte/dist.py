"""Grid representations of distributions, distances between them and validity projections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import isotonic_regression

__all__ = [
    "GridError",
    "GridCdf",
    "GridQuantile",
    "Dataset",
    "EvalGrid",
    "eval_cdf",
    "invert_cdf",
    "invert_cdf_rows",
    "crps_distance",
    "w2_sq_distance",
    "project_to_cdf",
    "project_to_quantile",
    "isotonic_rows",
    "cell_widths",
]

FloatArray = NDArray[np.float64]


class GridError(ValueError):
    """Raised when a grid or a gridded function violates its invariants."""


def _as_strict_grid(values: ArrayLike, name: str, min_len: int = 2) -> FloatArray:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.size < min_len:
        raise GridError(f"{name} needs at least {min_len} points, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise GridError(f"{name} contains non-finite values")
    if np.any(np.diff(arr) <= 0):
        raise GridError(f"{name} must be strictly increasing")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridCdf:
    """A CDF stored by its values on a strictly increasing outcome grid.

    Between knots the CDF is linear; outside the grid it is flat.
    """

    grid: FloatArray
    probs: FloatArray

    def __post_init__(self) -> None:
        grid = _as_strict_grid(self.grid, "grid")
        probs = np.asarray(self.probs, dtype=float).reshape(-1)
        if probs.shape != grid.shape:
            raise GridError(f"probs has {probs.size} entries for a grid of {grid.size}")
        if not np.all(np.isfinite(probs)):
            raise GridError("probs contains non-finite values")
        if probs.min() < 0.0 or probs.max() > 1.0:
            raise GridError("probs must lie in [0, 1]")
        if np.any(np.diff(probs) < 0):
            raise GridError("probs must be nondecreasing")
        probs.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "probs", probs)

    def __call__(self, y: ArrayLike) -> FloatArray:
        return eval_cdf(self, y)


@dataclass(frozen=True)
class GridQuantile:
    """A quantile function stored on strictly increasing levels in (0, 1)."""

    levels: FloatArray
    values: FloatArray

    def __post_init__(self) -> None:
        levels = _as_strict_grid(self.levels, "levels")
        if levels[0] <= 0.0 or levels[-1] >= 1.0:
            raise GridError("quantile levels must lie strictly inside (0, 1)")
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.shape != levels.shape:
            raise GridError(f"values has {values.size} entries for {levels.size} levels")
        if not np.all(np.isfinite(values)):
            raise GridError("quantile values contain non-finite entries")
        if np.any(np.diff(values) < 0):
            raise GridError("quantile values must be nondecreasing")
        values.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "values", values)

    def __call__(self, u: ArrayLike) -> FloatArray:
        return np.interp(np.asarray(u, dtype=float), self.levels, self.values)


@dataclass(frozen=True)
class Dataset:
    """Observational rows ``(x, a, y)`` with optional fold labels."""

    X: FloatArray
    a: NDArray[np.int64]
    y: FloatArray
    folds: NDArray[np.int64] | None = None

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[1] < 1:
            raise ValueError("covariates must be a 2-d array with at least one column")
        n = X.shape[0]
        a_raw = np.asarray(self.a).reshape(-1)
        if a_raw.size != n:
            raise ValueError(f"treatment has {a_raw.size} entries for {n} rows")
        if not np.all(np.isin(a_raw, (0, 1))):
            raise ValueError("treatment must be binary (0/1)")
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if y.size != n:
            raise ValueError(f"outcome has {y.size} entries for {n} rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("covariates and outcomes must be finite")
        folds = self.folds
        if folds is not None:
            folds = np.asarray(folds, dtype=np.int64).reshape(-1)
            if folds.size != n or folds.min(initial=0) < 0:
                raise ValueError("fold labels must be one nonnegative integer per row")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "a", a_raw.astype(np.int64))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "folds", folds)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx: ArrayLike) -> "Dataset":
        idx = np.asarray(idx)
        folds = None if self.folds is None else self.folds[idx]
        return Dataset(self.X[idx], self.a[idx], self.y[idx], folds)

    def arm(self, a: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.a == a))


def _midpoint_levels(n: int) -> FloatArray:
    return (np.arange(n) + 0.5) / n


@dataclass(frozen=True)
class EvalGrid:
    """Evaluation grids: treatment-effect values, quantile levels and outcome values.

    ``u_grid`` is the discretisation of [0, 1] used when searching over
    quantile levels; by default it has as many points as ``y_grid``.
    """

    delta_grid: FloatArray
    alpha_grid: FloatArray
    y_grid: FloatArray
    u_grid: FloatArray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        delta = _as_strict_grid(self.delta_grid, "delta_grid")
        alpha = _as_strict_grid(self.alpha_grid, "alpha_grid")
        if alpha[0] <= 0.0 or alpha[-1] >= 1.0:
            raise GridError("alpha_grid must lie strictly inside (0, 1)")
        ygrid = _as_strict_grid(self.y_grid, "y_grid")
        u = self.u_grid
        u = _midpoint_levels(ygrid.size) if u is None else u
        u = _as_strict_grid(u, "u_grid")
        if u[0] <= 0.0 or u[-1] >= 1.0:
            raise GridError("u_grid must lie strictly inside (0, 1)")
        object.__setattr__(self, "delta_grid", delta)
        object.__setattr__(self, "alpha_grid", alpha)
        object.__setattr__(self, "y_grid", ygrid)
        object.__setattr__(self, "u_grid", u)

    @classmethod
    def uniform(
        cls,
        delta_range: tuple[float, float],
        y_range: tuple[float, float],
        n_delta: int = 50,
        n_alpha: int = 50,
        n_d: int = 200,
    ) -> "EvalGrid":
        """Uniform delta/y grids and midpoint alpha/u levels."""
        return cls(
            delta_grid=np.linspace(*delta_range, n_delta),
            alpha_grid=_midpoint_levels(n_alpha),
            y_grid=np.linspace(*y_range, n_d),
            u_grid=_midpoint_levels(n_d),
        )

    @property
    def n_delta(self) -> int:
        return self.delta_grid.size

    @property
    def n_alpha(self) -> int:
        return self.alpha_grid.size


def eval_cdf(cdf: GridCdf, y: ArrayLike) -> FloatArray | float:
    """Evaluate a gridded CDF with linear interpolation and flat tails."""
    out = np.interp(np.asarray(y, dtype=float), cdf.grid, cdf.probs)
    return float(out) if np.ndim(out) == 0 else out


def invert_cdf(cdf: GridCdf, alpha: ArrayLike, return_saturation: bool = False):
    """Generalised inverse ``inf{y in [grid[0], grid[-1]] : alpha <= F(y)}``.

    Levels above ``probs[-1]`` cannot be reached; they map to ``grid[-1]`` and
    are reported as saturated when ``return_saturation`` is set.
    """
    a = np.asarray(alpha, dtype=float)
    if np.any((a < 0) | (a > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    grid, probs = cdf.grid, cdf.probs
    flat = np.atleast_1d(a).ravel()
    # first knot whose probability reaches alpha
    j = np.searchsorted(probs, flat, side="left")
    saturated = j >= grid.size
    j = np.clip(j, 1, grid.size - 1)
    p_lo, p_hi = probs[j - 1], probs[j]
    g_lo, g_hi = grid[j - 1], grid[j]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(p_hi > p_lo, (flat - p_lo) / (p_hi - p_lo), 1.0)
    out = g_lo + np.clip(frac, 0.0, 1.0) * (g_hi - g_lo)
    out = np.where(flat <= probs[0], grid[0], out)
    out = np.where(saturated, grid[-1], out)
    if np.ndim(a) == 0:
        value: float | FloatArray = float(out[0])
        sat: bool | NDArray[np.bool_] = bool(saturated[0])
    else:
        value, sat = out.reshape(a.shape), saturated.reshape(a.shape)
    return (value, sat) if return_saturation else value


def invert_cdf_rows(probs: ArrayLike, grid: ArrayLike, alpha: ArrayLike) -> FloatArray:
    """Row-wise :func:`invert_cdf` for a stack of CDFs sharing ``grid``; rows on the last axis."""
    P = np.atleast_2d(np.asarray(probs, dtype=float))
    a = np.asarray(alpha, dtype=float)
    out = np.empty((P.shape[0], a.size))
    for i, row in enumerate(P):
        out[i] = invert_cdf(GridCdf(grid, row), a)
    return out


def cell_widths(grid: ArrayLike, lo: float | None = None, hi: float | None = None) -> FloatArray:
    """Rectangle-rule weights: each knot owns the cell between neighbouring midpoints.

    The outer cells end at ``lo``/``hi`` (defaults: the first/last knot).
    """
    g = _as_strict_grid(grid, "grid")
    lo = g[0] if lo is None else lo
    hi = g[-1] if hi is None else hi
    if lo > g[0] or hi < g[-1]:
        raise GridError("integration domain must contain the grid")
    edges = np.concatenate(([lo], 0.5 * (g[1:] + g[:-1]), [hi]))
    return np.diff(edges)


def _sq_distance(f: ArrayLike, g: ArrayLike, weights: FloatArray) -> FloatArray | float:
    diff = np.asarray(f, dtype=float) - np.asarray(g, dtype=float)
    if diff.shape[-1] != weights.size:
        raise GridError(f"functions have {diff.shape[-1]} values for a grid of {weights.size}")
    out = (diff * diff) @ weights
    return float(out) if np.ndim(out) == 0 else out


def crps_distance(f: ArrayLike, g: ArrayLike, delta_grid: ArrayLike) -> FloatArray | float:
    """Integrated squared difference of two CDFs over the span of ``delta_grid``.

    The last axis of ``f`` and ``g`` runs along the grid; leading axes are kept.
    """
    return _sq_distance(f, g, cell_widths(delta_grid))


def w2_sq_distance(q1: ArrayLike, q2: ArrayLike, alpha_grid: ArrayLike) -> FloatArray | float:
    """Squared Wasserstein-2 distance of two quantile functions over [0, 1]."""
    return _sq_distance(q1, q2, cell_widths(alpha_grid, 0.0, 1.0))


def _check_finite(raw: FloatArray) -> None:
    if not np.all(np.isfinite(raw)):
        raise ValueError("cannot project non-finite values")


def isotonic_rows(values: ArrayLike, clip: bool = False) -> FloatArray:
    """L2 isotonic projection of every row (last axis), optionally clipped to [0, 1]."""
    arr = np.array(values, dtype=float)
    _check_finite(arr)
    flat = arr.reshape(-1, arr.shape[-1])
    for i, row in enumerate(flat):
        if np.any(np.diff(row) < 0):
            flat[i] = isotonic_regression(row).x
    if clip:
        np.clip(flat, 0.0, 1.0, out=flat)
    return flat.reshape(arr.shape)


def project_to_cdf(raw: ArrayLike, delta_grid: ArrayLike) -> GridCdf:
    """Nearest monotone, [0, 1]-valued function on the grid (isotonic fit, then clip)."""
    return GridCdf(delta_grid, isotonic_rows(np.asarray(raw, dtype=float).reshape(-1), clip=True))


def project_to_quantile(raw: ArrayLike, alpha_grid: ArrayLike) -> GridQuantile:
    """Isotonic projection along the levels; outcome values are left unbounded."""
    return GridQuantile(alpha_grid, isotonic_rows(np.asarray(raw, dtype=float).reshape(-1)))
