"""Synthetic benchmarks, ground-truth bounds, evaluation metrics and verification oracles."""

from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Literal, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit, logit, ndtr, ndtri

from .dist import (
    Dataset,
    EvalGrid,
    cell_widths,
    crps_distance,
    invert_cdf_rows,
    w2_sq_distance,
)
from .learners import LearnerConfig, fit_learner
from .makarov import (
    BoundsPair,
    DiscreteDist,
    analytic_normal_bounds,
    analytic_normal_quantile_bounds,
    cdf_bound_table,
    quantile_bound_table,
)
from .nuisance import FoldNuisance, NuisanceFit, clip_propensity

__all__ = [
    "SETTINGS",
    "SynthSetting",
    "UnsupportedEstimand",
    "TrueConditional",
    "TruePropensity",
    "GroundTruth",
    "MetricsRow",
    "MetricsReport",
    "METRICS_HEADER",
    "propensity",
    "mu",
    "generate_synth",
    "true_bounds",
    "true_bound_arrays",
    "delta_range_from_data",
    "default_eval_grid",
    "score_bounds",
    "evaluate",
    "run_learner",
    "run_benchmark",
    "coupling_oracle",
    "ProbeReport",
    "orthogonality_probe",
]

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
SETTINGS = ("normal", "multimodal", "exponential")
BLOCK_ROWS = 4096
TRUTH_POINTS = 2001
TRUTH_SDS = 8.0
EXP_MIN_MEAN = 1e-6

# (weight, offset from mu_0, sd) per arm
_MIXTURES = {
    0: ((0.7, -0.5, 1.5), (0.3, 1.5, 0.5)),
    1: ((0.3, -2.5, 0.35), (0.4, 0.5, 0.75), (0.3, 2.0, 0.5)),
}


class UnsupportedEstimand(ValueError):
    """The requested estimand has no ground truth in this setting."""


@dataclass(frozen=True)
class SynthSetting:
    kind: Literal["normal", "multimodal", "exponential"]
    seed: int = 0
    stream: int = 0  # independent draws for the same seed, e.g. a test set

    def __post_init__(self) -> None:
        if self.kind not in SETTINGS:
            raise ValueError(f"unknown setting {self.kind!r}; choose from {SETTINGS}")


# ---------------------------------------------------------------------------
# mechanism


def propensity(X: ArrayLike) -> FloatArray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return expit(0.75 * X[:, 0] - X[:, 1] + 0.5)


def mu(X: ArrayLike, a: ArrayLike) -> FloatArray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    x1, x2 = X[:, 0], X[:, 1]
    a = np.asarray(a, dtype=float)
    return (2 * a - 1) * x1 + a - 2 * np.sin(2 * x1 + x2) - 2 * x2 * (1 + 0.5 * x1)


def _draw_outcome(kind: str, X: FloatArray, a: NDArray[np.int64], rng: np.random.Generator) -> FloatArray:
    if kind == "normal":
        return mu(X, a) + rng.standard_normal(a.size)
    if kind == "exponential":
        return rng.exponential(np.abs(mu(X, a)))
    base = mu(X, 0)
    y = np.empty(a.size)
    for arm, comps in _MIXTURES.items():
        idx = np.flatnonzero(a == arm)
        w = np.array([c[0] for c in comps])
        pick = rng.choice(len(comps), size=idx.size, p=w)
        off = np.array([c[1] for c in comps])[pick]
        sd = np.array([c[2] for c in comps])[pick]
        y[idx] = base[idx] + off + sd * rng.standard_normal(idx.size)
    return y


def _block(setting: SynthSetting, b: int, size: int) -> tuple[FloatArray, NDArray[np.int64], FloatArray]:
    rng = np.random.default_rng(np.random.SeedSequence(setting.seed, spawn_key=(setting.stream, b)))
    X = np.column_stack([rng.uniform(-2.0, 2.0, size), rng.standard_normal(size)])
    a = (rng.uniform(size=size) < propensity(X)).astype(np.int64)
    if setting.kind == "exponential":
        # the rate is undefined where mu_A vanishes; redraw those rows
        bad = np.abs(mu(X, a)) < EXP_MIN_MEAN
        while np.any(bad):
            k = int(bad.sum())
            X[bad] = np.column_stack([rng.uniform(-2.0, 2.0, k), rng.standard_normal(k)])
            a[bad] = (rng.uniform(size=k) < propensity(X[bad])).astype(np.int64)
            bad = np.abs(mu(X, a)) < EXP_MIN_MEAN
    return X, a, _draw_outcome(setting.kind, X, a, rng)


def generate_synth(setting: SynthSetting, n: int) -> Dataset:
    """Draw ``n`` i.i.d. rows; block ``b`` always uses the same child seed."""
    if n < 1:
        raise ValueError("n must be at least 1")
    # full blocks are always drawn, so a shorter sample is a prefix of a longer one
    parts = [_block(setting, b, BLOCK_ROWS) for b in range(-(-n // BLOCK_ROWS))]
    X = np.concatenate([p[0] for p in parts])[:n]
    a = np.concatenate([p[1] for p in parts])[:n]
    y = np.concatenate([p[2] for p in parts])[:n]
    return Dataset(X, a, y)


# ---------------------------------------------------------------------------
# true nuisances


def _leading(q: ArrayLike) -> FloatArray:
    q = np.asarray(q, dtype=float)
    if q.ndim == 0:
        raise ValueError("query array needs a leading row axis")
    return q


def _col(v: FloatArray, ndim: int) -> FloatArray:
    return v.reshape(v.shape + (1,) * (ndim - 1))


@dataclass(frozen=True)
class TrueConditional:
    """True ``Y | X, A = arm`` law with the nuisance query convention (leading row axis)."""

    kind: str
    arm: int

    def moments(self, X: ArrayLike) -> tuple[FloatArray, FloatArray]:
        m = mu(X, self.arm)
        if self.kind == "normal":
            return m, np.ones_like(m)
        if self.kind == "exponential":
            return np.abs(m), np.abs(m)
        w, off, sd = (np.array(c) for c in zip(*_MIXTURES[self.arm]))
        mean_off = w @ off
        var = w @ (sd**2 + off**2) - mean_off**2
        return mu(X, 0) + mean_off, np.full_like(m, np.sqrt(var))

    def cdf(self, X: ArrayLike, y: ArrayLike) -> FloatArray:
        y = _leading(y)
        if self.kind == "normal":
            return ndtr(y - _col(mu(X, self.arm), y.ndim))
        if self.kind == "exponential":
            scale = _col(np.abs(mu(X, self.arm)), y.ndim)
            return -np.expm1(-np.maximum(y, 0.0) / scale)
        base = _col(mu(X, 0), y.ndim)
        return sum(w * ndtr((y - base - off) / sd) for w, off, sd in _MIXTURES[self.arm])

    def density(self, X: ArrayLike, y: ArrayLike) -> FloatArray:
        y = _leading(y)
        if self.kind == "normal":
            z = y - _col(mu(X, self.arm), y.ndim)
            return np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
        if self.kind == "exponential":
            scale = _col(np.abs(mu(X, self.arm)), y.ndim)
            return np.where(y >= 0, np.exp(-np.maximum(y, 0.0) / scale) / scale, 0.0)
        base = _col(mu(X, 0), y.ndim)
        out = 0.0
        for w, off, sd in _MIXTURES[self.arm]:
            z = (y - base - off) / sd
            out = out + w * np.exp(-0.5 * z * z) / (sd * np.sqrt(2 * np.pi))
        return out

    def quantile(self, X: ArrayLike, u: ArrayLike) -> FloatArray:
        u = _leading(u)
        if self.kind == "normal":
            return _col(mu(X, self.arm), u.ndim) + ndtri(u)
        if self.kind == "exponential":
            return -_col(np.abs(mu(X, self.arm)), u.ndim) * np.log1p(-u)
        return self._mixture_quantile(X, u)

    def _mixture_quantile(self, X: ArrayLike, u: FloatArray) -> FloatArray:
        base = _col(mu(X, 0), u.ndim)
        lo = base + min(off - 40 * sd for _, off, sd in _MIXTURES[self.arm]) + 0 * u
        hi = base + max(off + 40 * sd for _, off, sd in _MIXTURES[self.arm]) + 0 * u
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = self.cdf(X, mid) < u
            lo, hi = np.where(below, mid, lo), np.where(below, hi, mid)
            if np.max(hi - lo) < 1e-12:
                break
        return 0.5 * (lo + hi)


@dataclass(frozen=True)
class TruePropensity:
    clip_floor: float = 0.05

    def predict(self, X: ArrayLike, clip: bool = True) -> FloatArray:
        p = propensity(X)
        return clip_propensity(p, self.clip_floor) if clip else p


@dataclass(frozen=True)
class GroundTruth:
    """True nuisances and bounds for one synthetic setting."""

    kind: str
    clip_floor: float = 0.05

    def nuisance(self) -> FoldNuisance:
        return FoldNuisance(TruePropensity(self.clip_floor), TrueConditional(self.kind, 0), TrueConditional(self.kind, 1))

    def oracle_fit(self, n: int) -> NuisanceFit:
        return NuisanceFit.shared(n, self.nuisance())

    def bounds(self, X: ArrayLike, eval_grid: EvalGrid, estimand: str = "cdf_bounds",
               method: str = "auto") -> tuple[FloatArray, FloatArray]:
        return true_bound_arrays(self.kind, X, eval_grid, estimand, method)


# ---------------------------------------------------------------------------
# true bounds


def _numeric_cdf_bounds(kind: str, X: FloatArray, delta: FloatArray) -> tuple[FloatArray, FloatArray]:
    f1, f0 = TrueConditional(kind, 1), TrueConditional(kind, 0)
    mean, sd = f1.moments(X)
    lo = mean - TRUTH_SDS * sd
    if kind == "exponential":
        lo = np.maximum(lo, 0.0)
    hi = mean + TRUTH_SDS * sd
    lower = np.empty((X.shape[0], delta.size))
    upper = np.empty_like(lower)
    step = 16
    for s in range(0, X.shape[0], step):
        sl = slice(s, s + step)
        # covering the treated arm's support suffices: outside it the objective is monotone
        Y = np.linspace(lo[sl], hi[sl], TRUTH_POINTS, axis=1)
        table = cdf_bound_table(f1.cdf(X[sl], Y), f0.cdf(X[sl], Y[:, None, :] - delta[None, :, None]))
        lower[sl], upper[sl] = table.lower, table.upper
    return lower, upper


def _numeric_quantile_bounds(kind: str, X: FloatArray, eval_grid: EvalGrid) -> tuple[FloatArray, FloatArray]:
    f1, f0 = TrueConditional(kind, 1), TrueConditional(kind, 0)
    fine = EvalGrid(eval_grid.delta_grid, eval_grid.alpha_grid, np.arange(TRUTH_POINTS, dtype=float))
    table = quantile_bound_table(lambda u: f1.quantile(X, u[None]), lambda u: f0.quantile(X, u[None]), fine)
    return table.lower, table.upper


def true_bound_arrays(
    kind: str, X: ArrayLike, eval_grid: EvalGrid, estimand: str = "cdf_bounds", method: str = "auto"
) -> tuple[FloatArray, FloatArray]:
    """True ``(lower, upper)`` bounds at every row of ``X``; analytic for the normal setting."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if method not in ("auto", "numeric"):
        raise ValueError("method must be 'auto' or 'numeric'")
    analytic = kind == "normal" and method == "auto"
    if estimand == "cdf_bounds":
        if analytic:
            d = eval_grid.delta_grid[None, :]
            return analytic_normal_bounds(mu(X, 1)[:, None], mu(X, 0)[:, None], 1.0, d)
        return _numeric_cdf_bounds(kind, X, eval_grid.delta_grid)
    if estimand == "quantile_bounds":
        if kind == "multimodal":
            raise UnsupportedEstimand("the multimodal setting has no ground-truth quantile bounds")
        if analytic:
            al = eval_grid.alpha_grid[None, :]
            return analytic_normal_quantile_bounds(mu(X, 1)[:, None], mu(X, 0)[:, None], 1.0, al)
        return _numeric_quantile_bounds(kind, X, eval_grid)
    raise ValueError(f"unknown estimand {estimand!r}")


def true_bounds(setting: SynthSetting | str, x: ArrayLike, eval_grid: EvalGrid,
                estimand: str = "cdf_bounds", method: str = "auto") -> BoundsPair:
    kind = setting.kind if isinstance(setting, SynthSetting) else setting
    x = np.asarray(x, dtype=float).reshape(1, -1)
    lo, up = true_bound_arrays(kind, x, eval_grid, estimand, method)
    grid = eval_grid.delta_grid if estimand == "cdf_bounds" else eval_grid.alpha_grid
    return BoundsPair.from_arrays(grid, lo[0], up[0], "cdf" if estimand == "cdf_bounds" else "quantile")


# ---------------------------------------------------------------------------
# grids


def delta_range_from_data(data: Dataset, pad: float = 0.1) -> tuple[float, float]:
    """Symmetric effect range ``[-M, M]`` covering every treated-minus-control difference, padded."""
    y1, y0 = data.y[data.a == 1], data.y[data.a == 0]
    if y1.size == 0 or y0.size == 0:
        raise ValueError("both arms are needed to set a delta range")
    m = max(abs(y1.min() - y0.max()), abs(y1.max() - y0.min()))
    m = m * (1.0 + pad) if m > 0 else 1.0
    return -m, m


def y_range_from_data(data: Dataset, pad: float = 0.1) -> tuple[float, float]:
    lo, hi = float(data.y.min()), float(data.y.max())
    width = hi - lo if hi > lo else 1.0
    return lo - pad * width, hi + pad * width


def grid_from_data(data: Dataset, n_delta: int = 50, n_alpha: int = 50, n_d: int = 200) -> EvalGrid:
    return EvalGrid.uniform(delta_range_from_data(data), y_range_from_data(data), n_delta, n_alpha, n_d)


@lru_cache(maxsize=None)
def default_eval_grid(kind: str, n_delta: int = 50, n_alpha: int = 50, n_d: int = 200) -> EvalGrid:
    """Grid fixed per setting from a reference sample, shared by truth and predictions."""
    ref = generate_synth(SynthSetting(kind, seed=0, stream=99), 10_000)
    return grid_from_data(ref, n_delta, n_alpha, n_d)


# ---------------------------------------------------------------------------
# metrics


METRICS_HEADER = ("seed", "n_train", "learner", "side", "estimand", "rcrps_in", "rcrps_out", "w2_in", "w2_out")


def _step_cdf(Q: FloatArray, delta: FloatArray) -> FloatArray:
    # CDF of the uniform law on the quantile values at the (midpoint) levels
    return np.mean(Q[:, None, :] <= delta[None, :, None], axis=2)


def score_bounds(pred: FloatArray, truth: FloatArray, kind: str, eval_grid: EvalGrid) -> tuple[float, float]:
    """``(rCRPS, W2)`` between predicted and true bound functions, rows = covariates."""
    pred, truth = np.atleast_2d(pred), np.atleast_2d(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.shape[0] == 0:
        raise ValueError("empty evaluation set")
    dg, ag = eval_grid.delta_grid, eval_grid.alpha_grid
    if kind == "cdf":
        crps = crps_distance(pred, truth, dg)
        w2 = w2_sq_distance(invert_cdf_rows(pred, dg, ag), invert_cdf_rows(truth, dg, ag), ag)
    else:
        crps = crps_distance(_step_cdf(pred, dg), _step_cdf(truth, dg), dg)
        w2 = w2_sq_distance(pred, truth, ag)
    return float(np.sqrt(np.mean(crps))), float(np.sqrt(np.mean(w2)))


@dataclass(frozen=True)
class MetricsRow:
    seed: int
    n_train: int
    learner: str
    side: str
    estimand: str
    rcrps_in: float
    rcrps_out: float
    w2_in: float
    w2_out: float

    def __post_init__(self) -> None:
        for name in ("rcrps_in", "rcrps_out", "w2_in", "w2_out"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def extend(self, rows: Iterable[MetricsRow]) -> None:
        self.rows.extend(rows)

    def sorted(self) -> "MetricsReport":
        return MetricsReport(sorted(self.rows, key=lambda r: (r.seed, r.n_train, r.learner, r.estimand, r.side)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.rows:
            w.writerow([r.seed, r.n_train, r.learner, r.side, r.estimand,
                        repr(r.rcrps_in), repr(r.rcrps_out), repr(r.w2_in), repr(r.w2_out)])
        return buf.getvalue()

    def select(self, **match) -> list[MetricsRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]


def evaluate(
    pred_in: tuple[FloatArray, FloatArray],
    pred_out: tuple[FloatArray, FloatArray],
    truth_in: tuple[FloatArray, FloatArray],
    truth_out: tuple[FloatArray, FloatArray],
    eval_grid: EvalGrid,
    estimand: str,
    seed: int,
    n_train: int,
    learner: str,
) -> list[MetricsRow]:
    """One report row per bound side from in-sample and out-sample predictions."""
    kind = "cdf" if estimand == "cdf_bounds" else "quantile"
    rows = []
    for i, side in enumerate(("lower", "upper")):
        c_in, w_in = score_bounds(pred_in[i], truth_in[i], kind, eval_grid)
        c_out, w_out = score_bounds(pred_out[i], truth_out[i], kind, eval_grid)
        rows.append(MetricsRow(seed, n_train, learner, side, estimand, c_in, c_out, w_in, w_out))
    return rows


def run_learner(
    kind: str, train: Dataset, test: Dataset, config: LearnerConfig, seed: int,
    oracle: bool = False, label: str | None = None, truth_cache: dict | None = None,
) -> list[MetricsRow]:
    """Fit one learner on ``train`` and score it against the true bounds."""
    gt = GroundTruth(kind, config.clip_floor)
    cache = {} if truth_cache is None else truth_cache
    for name, d in (("in", train), ("out", test)):
        key = (name, config.estimand)
        if key not in cache:
            cache[key] = gt.bounds(d.X, config.eval_grid, config.estimand)
    nuisance = gt.oracle_fit(train.n) if oracle else None
    fitted = fit_learner(train, config, nuisance)
    p_in = fitted.predict(train.X)[:2]
    p_out = fitted.predict(test.X)[:2]
    return evaluate(p_in, p_out, cache[("in", config.estimand)], cache[("out", config.estimand)],
                    config.eval_grid, config.estimand, seed, train.n, label or config.learner)


def run_benchmark(
    kind: str,
    n_train: Sequence[int],
    seeds: Sequence[int],
    learners: Sequence[str],
    estimands: Sequence[str] = ("cdf_bounds",),
    n_test: int = 1000,
    base: LearnerConfig | None = None,
    oracle: bool = False,
) -> MetricsReport:
    """Full benchmark grid; rows are returned in canonical order."""
    from dataclasses import replace

    grid = default_eval_grid(kind) if base is None else base.eval_grid
    base = base or LearnerConfig(eval_grid=grid)
    report = MetricsReport()
    for seed in seeds:
        test = generate_synth(SynthSetting(kind, seed, stream=1), n_test)
        for n in n_train:
            train = generate_synth(SynthSetting(kind, seed, stream=0), n)
            cache: dict = {}
            for est in estimands:
                for learner in learners:
                    cfg = replace(base, learner=learner, estimand=est)
                    report.extend(run_learner(kind, train, test, cfg, seed, oracle, truth_cache=cache))
                    logger.info("seed %d n %d %s %s done", seed, n, learner, est)
    return report.sorted()


# ---------------------------------------------------------------------------
# coupling oracle


@lru_cache(maxsize=None)
def _tree_bases(m: int, n: int) -> tuple[NDArray[np.intp], FloatArray]:
    """All spanning-tree cell sets of the m x n transportation graph with their solve matrices."""
    A = np.zeros((m + n, m * n))
    for i in range(m):
        for j in range(n):
            A[i, i * n + j] = 1.0
            A[m + j, i * n + j] = 1.0
    A = A[:-1]  # one marginal constraint is implied by the others
    k = m + n - 1
    cells, inverses = [], []
    for S in itertools.combinations(range(m * n), k):
        B = A[:, S]
        if abs(np.linalg.det(B)) > 0.5:  # totally unimodular: det is 0 or +-1
            cells.append(S)
            inverses.append(np.linalg.inv(B))
    return np.array(cells, dtype=np.intp).reshape(-1, k), np.array(inverses).reshape(-1, k, k)


def coupling_oracle(d1: DiscreteDist, d0: DiscreteDist, delta: float) -> tuple[float, float]:
    """Exact min and max of ``P(Y1 - Y0 <= delta)`` over all couplings of ``d1`` and ``d0``.

    Enumerates every basic feasible solution (spanning-tree basis) of the
    transportation polytope; a linear objective is optimised at one of them.
    """
    m, n = d1.support.size, d0.support.size
    if m > 4 or n > 4:
        raise ValueError("coupling oracle supports at most 4 atoms per marginal")
    b = np.concatenate([d1.pmf, d0.pmf])[:-1]
    c = (d1.support[:, None] - d0.support[None, :] <= delta).astype(float).ravel()
    if m == 1 or n == 1:
        coupling = np.outer(d1.pmf, d0.pmf).ravel()
        v = float(c @ coupling)
        return v, v
    cells, inv = _tree_bases(m, n)
    x = inv @ b
    feasible = np.all(x >= -1e-12, axis=1)
    values = np.einsum("tk,tk->t", c[cells], np.clip(x, 0.0, None))[feasible]
    return float(values.min()), float(values.max())


# ---------------------------------------------------------------------------
# orthogonality probe


@dataclass(frozen=True)
class ProbeReport:
    t_values: FloatArray
    perturbation_au: FloatArray
    perturbation_ca: FloatArray
    slope_au: float
    slope_ca: float
    n_draws: int


def _mix_cdf(z: FloatArray, t: float, shift: float) -> FloatArray:
    return (1 - t) * ndtr(z) + t * ndtr(z - shift)


def _mix_pdf(z: FloatArray, t: float, shift: float) -> FloatArray:
    return ((1 - t) * np.exp(-0.5 * z * z) + t * np.exp(-0.5 * (z - shift) ** 2)) / np.sqrt(2 * np.pi)


def _mix_pdf_slope(z: FloatArray, t: float, shift: float) -> FloatArray:
    v = z - shift
    return -((1 - t) * z * np.exp(-0.5 * z * z) + t * v * np.exp(-0.5 * v * v)) / np.sqrt(2 * np.pi)


def _sup_location(s: FloatArray, t: float, shift: float, tol: float = 1e-12) -> FloatArray:
    """Maximiser of ``G_t(z) - G_t(z - s)`` for ``s > 0``, where the two densities cross.

    Newton iterations on the density difference, restricted to unconverged entries.
    """
    z = 0.5 * s + 0.5 * t * shift
    active = np.arange(s.size)
    for _ in range(50):
        za, sa = z[active], s[active]
        g = _mix_pdf(za, t, shift) - _mix_pdf(za - sa, t, shift)
        dg = _mix_pdf_slope(za, t, shift) - _mix_pdf_slope(za - sa, t, shift)
        step = np.clip(np.where(dg < 0, g / np.where(dg < 0, dg, -1.0), 0.0), -0.5, 0.5)
        z[active] = za - step
        active = active[np.abs(step) > tol]
        if active.size == 0:
            break
    return z


def orthogonality_probe(
    kind: str = "normal",
    t_values: Sequence[float] = (0.4, 0.2, 0.1, 0.05),
    n_draws: int = 100_000,
    seed: int = 0,
    mean_shift: float = 0.5,
    logit_shift: float = 0.5,
    clip_floor: float = 0.0,
    eval_grid: EvalGrid | None = None,
) -> ProbeReport:
    """Log-log slope of the CRPS-risk perturbation along ``eta_t = eta + t (eta~ - eta)``.

    The risk is the part of the population CRPS risk of the lower-bound
    pseudo-outcome that depends on the working model, evaluated at the true
    lower bound ``g*``: ``R(t) = E int g*^2 - 2 g* E[F~_t | X] d delta``.
    Conditional expectations over ``(A, Y) | X`` are exact; the outer mean uses
    ``n_draws`` covariate draws.  The perturbed laws are mixtures with the
    mean-shifted law and the perturbed propensity has its logit shifted.
    """
    if kind != "normal":
        raise ValueError("the orthogonality probe is implemented for the normal setting")
    if n_draws < 10_000:
        raise ValueError("the probe needs at least 10^4 Monte Carlo draws")
    t = np.asarray(t_values, dtype=float)
    if np.any(t <= 0) or np.any(np.diff(t) >= 0):
        raise ValueError("t_values must be positive and strictly decreasing")
    grid = eval_grid or default_eval_grid(kind)
    X = generate_synth(SynthSetting(kind, seed, stream=7), n_draws).X
    w = cell_widths(grid.delta_grid)
    s = grid.delta_grid[None, :] - (mu(X, 1) - mu(X, 0))[:, None]
    pi = propensity(X)[:, None]
    pi_tilde = expit(logit(pi) + logit_shift)
    pos = s > 0
    rows = np.broadcast_to(np.arange(n_draws)[:, None], s.shape)[pos]
    sp = s[pos]
    wp = np.broadcast_to(w, s.shape)[pos]
    pi, pi_tilde = pi[rows, 0], pi_tilde[rows, 0]
    g_star = 2 * ndtr(sp / 2) - 1

    def risk(tv: float, gamma: float) -> float:
        # cells with s <= 0 have g* = 0 and drop out of the risk
        z = _sup_location(sp, tv, mean_shift)
        plug = np.maximum(_mix_cdf(z, tv, mean_shift) - _mix_cdf(z - sp, tv, mean_shift), 0.0)
        pit = pi + tv * (pi_tilde - pi)
        if clip_floor > 0:
            pit = clip_propensity(pit, clip_floor)
        # E[C_t | X]: indicator expectations replaced by the true CDFs
        corr = (pi / pit) * (ndtr(z) - _mix_cdf(z, tv, mean_shift)) - ((1 - pi) / (1 - pit)) * (
            ndtr(z - sp) - _mix_cdf(z - sp, tv, mean_shift)
        )
        fitted = plug + gamma * np.where(plug > 0, corr, 0.0)
        return float(np.sum((g_star * g_star - 2 * g_star * fitted) * wp) / n_draws)

    out = {}
    for name, gamma in (("au", 1.0), ("ca", 0.0)):
        r0 = risk(0.0, gamma)
        out[name] = np.array([abs(risk(tv, gamma) - r0) for tv in t])
    slopes = {k: float(np.polyfit(np.log(t), np.log(v), 1)[0]) for k, v in out.items()}
    return ProbeReport(t, out["au"], out["ca"], slopes["au"], slopes["ca"], n_draws)
