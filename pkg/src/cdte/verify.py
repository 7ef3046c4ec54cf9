"""Numerical property battery: exact oracles, enclosure, mean-zero and orthogonality checks.

Each check returns a :class:`PropertyResult` holding the measured value and the
threshold it is compared against, so callers can print or re-assert them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import ndtr
from scipy.stats import spearmanr

from .bench import (
    GroundTruth,
    SynthSetting,
    coupling_oracle,
    default_eval_grid,
    generate_synth,
    mu,
    orthogonality_probe,
    run_benchmark,
)
from .dist import EvalGrid, GridCdf, GridError
from .learners import LearnerConfig, _cdf_corrections, _cdf_table, pseudo_surface
from .makarov import DiscreteDist, analytic_normal_bounds, cdf_bounds, cdf_bounds_mixed, fna_bounds
from .nuisance import cross_fit

__all__ = ["PropertyResult", "CHECKS", "run_checks", "random_discrete"]


@dataclass(frozen=True)
class PropertyResult:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: value={self.value:.6g} threshold={self.threshold:.6g} {self.detail}".rstrip()


def random_discrete(rng: np.random.Generator, max_atoms: int = 4, integer: bool = True) -> DiscreteDist:
    k = int(rng.integers(1, max_atoms + 1))
    if integer:
        support = np.sort(rng.choice(np.arange(-3, 4), size=k, replace=False)).astype(float)
    else:
        support = np.sort(rng.normal(size=k))
    pmf = rng.dirichlet(np.ones(k))
    return DiscreteDist(support, pmf)


def check_analytic_numeric(n: int = 50, seed: int = 0) -> PropertyResult:
    """Largest gap between closed-form normal bounds and the grid route over random (tau, sigma, delta)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        tau, sigma = rng.uniform(-3, 3), rng.uniform(0.3, 3)
        deltas = np.sort(rng.uniform(tau - 4 * sigma, tau + 4 * sigma, 2))
        if deltas[1] - deltas[0] < 1e-6:
            deltas[1] = deltas[0] + 1e-3
        y = np.linspace(tau - 10 * sigma, tau + 10 * sigma, 4001)
        eg = EvalGrid(deltas, np.array([0.25, 0.75]), y)
        num = cdf_bounds(lambda v: _ncdf(v, tau, sigma), lambda v: _ncdf(v, 0.0, sigma), eg)
        lo, up = analytic_normal_bounds(tau, 0.0, sigma, deltas)
        worst = max(worst, np.max(np.abs(num.lower_values - lo)), np.max(np.abs(num.upper_values - up)))
    return PropertyResult("analytic_vs_numeric_supnorm", worst, 1e-3, worst < 1e-3, f"({n} random instances)")


def _ncdf(v, m, s):
    return ndtr((np.asarray(v) - m) / s)


def check_sharpness(n: int = 100, seed: int = 0) -> PropertyResult:
    rng = np.random.default_rng(seed)
    worst, agree = 0.0, 0
    for _ in range(n):
        d1, d0 = random_discrete(rng), random_discrete(rng)
        delta = float(rng.choice([rng.integers(-4, 5), rng.uniform(-4, 4)]))
        lo, up = cdf_bounds_mixed(d1, d0, delta)
        omin, omax = coupling_oracle(d1, d0, delta)
        err = max(abs(lo - omin), abs(up - omax))
        worst = max(worst, err)
        agree += err <= 1e-9
    return PropertyResult("pointwise_sharpness", worst, 1e-9, agree == n, f"({agree}/{n} instances agree)")


def check_fna(n: int = 100, seed: int = 0) -> PropertyResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n):
        m = int(rng.integers(1, 20))
        mu0, mu1 = rng.uniform(size=m), rng.uniform(size=m)
        if rng.uniform() < 0.3:
            mu0[rng.integers(m)] = float(rng.integers(2))
        lo, up = fna_bounds(mu0, mu1)
        per_row = [cdf_bounds_mixed(DiscreteDist.bernoulli(b), DiscreteDist.bernoulli(c), -1.0) for c, b in zip(mu0, mu1)]
        lo_ref = float(np.mean([p[0] for p in per_row]))
        up_ref = float(np.mean([p[1] for p in per_row]))
        mismatches += (round(lo, 12) != round(lo_ref, 12)) or (round(up, 12) != round(up_ref, 12))
    return PropertyResult("fna_reduction", float(mismatches), 0.0, mismatches == 0, f"({n - mismatches}/{n} exact)")


def check_enclosure(n_draws: int = 1_000_000, seed: int = 0) -> PropertyResult:
    """Monotone and antitone couplings of the normal setting stay inside the bounds (3 MC-stderr)."""
    rng = np.random.default_rng(seed)
    xs = np.array([[0.5, 0.2], [-1.0, 1.0], [1.5, -0.5]])
    worst = -np.inf
    for x in xs:
        m1, m0 = float(mu(x, 1)[0]), float(mu(x, 0)[0])
        tau = m1 - m0
        delta = np.linspace(tau - 6.0, tau + 6.0, 50)
        lo, up = analytic_normal_bounds(m1, m0, 1.0, delta)
        z = rng.standard_normal(n_draws)
        for sign in (1.0, -1.0):
            eff = (m1 + z) - (m0 + sign * z)
            p = np.mean(eff[:, None] <= delta[None, :], axis=0)
            se = np.sqrt(p * (1 - p) / n_draws)
            # positive excess means the coupling leaves the band
            excess = np.maximum(lo - 3 * se - p, p - up - 3 * se)
            worst = max(worst, float(excess.max()))
    return PropertyResult("enclosure_couplings", worst, 0.0, worst <= 0.0, "(max excess over band; <= 0 passes)")


def correction_mean_zero(n: int = 10_000, seed: int = 0, side: str = "lower", clip_floor: float = 0.05):
    """Per-delta mean of the CDF correction term under the true nuisances.

    Returns ``(mean, se_exact, se_sample)``.  ``se_exact`` is the standard error
    ``sqrt(Var(C) / n)`` with ``Var(C) = E[Var(C | X)]`` computed from the known
    laws (the conditional mean is zero); ``se_sample`` is the usual plug-in
    estimate, which collapses in tail cells where the indicator events are rare.
    """
    data = generate_synth(SynthSetting("normal", seed, stream=3), n)
    eg = default_eval_grid("normal")
    nuis = GroundTruth("normal", clip_floor).nuisance()
    terms, cond_var = [], []
    for s in range(0, n, 512):
        sl = slice(s, s + 512)
        X = data.X[sl]
        t = _cdf_table(nuis, X, eg)
        lo, up = _cdf_corrections(nuis, X, data.a[sl].astype(float), data.y[sl], t, eg, clip_floor)
        terms.append(lo if side == "lower" else up)
        if side == "lower":
            f1, f0, active = t.f1_sup, t.f0_sup, t.sup > 0
        else:
            f1, f0, active = t.f1_inf, t.f0_inf, t.inf < 0
        pi = nuis.propensity.predict(X, clip=False)[:, None]
        pc = np.clip(pi, clip_floor, 1 - clip_floor)
        v = pi / pc**2 * f1 * (1 - f1) + (1 - pi) / (1 - pc) ** 2 * f0 * (1 - f0)
        cond_var.append(np.where(active, v, 0.0))
    C = np.concatenate(terms)
    mean = C.mean(axis=0)
    se_exact = np.sqrt(np.concatenate(cond_var).mean(axis=0) / n)
    se_sample = C.std(axis=0, ddof=1) / np.sqrt(n)
    return mean, se_exact, se_sample


def check_mean_zero(n: int = 10_000, seed: int = 0) -> PropertyResult:
    worst, ok, naive_fail = 0.0, True, 0
    for side in ("lower", "upper"):
        mean, se, se_sample = correction_mean_zero(n, seed, side)
        ok &= bool(np.all(np.abs(mean) <= 3 * se))
        naive_fail += int(np.sum(np.abs(mean) > 3 * se_sample))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, np.abs(mean) / se, 0.0)
        worst = max(worst, float(z.max()))
    return PropertyResult(
        "one_step_mean_zero", worst, 3.0, ok,
        f"(max |mean|/stderr over delta grid, both sides; cells beyond 3 sample-stderr: {naive_fail})",
    )


def check_orthogonality(n_draws: int = 100_000) -> list[PropertyResult]:
    r = orthogonality_probe("normal", n_draws=n_draws)
    return [
        PropertyResult("orthogonality_slope_au", r.slope_au, 1.9, r.slope_au >= 1.9, "(>= threshold passes)"),
        PropertyResult("orthogonality_slope_ca", r.slope_ca, 1.3, r.slope_ca <= 1.3, "(<= threshold passes)"),
    ]


def gamma_surfaces(n: int = 500, seed: int = 0, K: int = 2):
    data = generate_synth(SynthSetting("normal", seed), n)
    eg = default_eval_grid("normal")
    _, fit = cross_fit(data, K=K)
    out = {}
    for g in (0.0, 1.0):
        cfg = LearnerConfig(eval_grid=eg, learner="au", gamma=g, K=K)
        out[g] = pseudo_surface(data, fit, cfg)
    return data, fit, out


def check_gamma_zero(n: int = 500, seed: int = 0) -> PropertyResult:
    _, _, surf = gamma_surfaces(n, seed)
    lo0, up0 = surf[0.0]
    exact = np.array_equal(lo0.values, lo0.plugin) and np.array_equal(up0.values, up0.plugin)
    invalid0 = 0
    for s in (lo0, up0):
        for row in s.values:
            try:
                GridCdf(s.grid, row)
            except GridError:
                invalid0 += 1
    violations1 = int(surf[1.0][0].invalid_rows().sum() + surf[1.0][1].invalid_rows().sum())
    ok = exact and invalid0 == 0 and violations1 >= 1
    return PropertyResult(
        "gamma_zero_reduction", float(invalid0), 0.0, ok,
        f"(exact={exact}; invalid gamma=0 rows={invalid0}; gamma=1 violations={violations1})",
    )


def learner_ordering(seeds=range(10), n_train: int = 1000, n_test: int = 1000):
    rep = run_benchmark("normal", [n_train], list(seeds), ["plugin", "au"], n_test=n_test)
    out = {}
    for side in ("lower", "upper"):
        out[side] = {
            lr: float(np.mean([r.rcrps_out for r in rep.select(learner=lr, side=side)])) for lr in ("plugin", "au")
        }
    return out


def check_learner_ordering(seeds=range(10)) -> PropertyResult:
    res = learner_ordering(seeds)
    margin = min(res[s]["plugin"] - res[s]["au"] for s in res)
    detail = " ".join(f"{s}: au={res[s]['au']:.4f} plugin={res[s]['plugin']:.4f}" for s in res)
    return PropertyResult("learner_ordering_margin", margin, 0.0, margin > 0, f"({detail})")


def oracle_gap(ns=(250, 1000, 4000), seeds=range(10)):
    """Pairs ``(n, side, gap)`` of AU out-sample rCRPS with estimated minus oracle nuisances."""
    eg = default_eval_grid("normal")
    base = LearnerConfig(eval_grid=eg, learner="au")
    est = run_benchmark("normal", list(ns), list(seeds), ["au"], base=base)
    orc = run_benchmark("normal", list(ns), list(seeds), ["au"], base=base, oracle=True)
    pairs = []
    for r_e, r_o in zip(est.rows, orc.rows):
        assert (r_e.seed, r_e.n_train, r_e.side) == (r_o.seed, r_o.n_train, r_o.side)
        pairs.append((r_e.n_train, r_e.side, r_e.rcrps_out - r_o.rcrps_out))
    return pairs


def check_oracle_gap(ns=(250, 1000, 4000), seeds=range(10)) -> PropertyResult:
    pairs = oracle_gap(ns, seeds)
    rhos = {}
    for side in ("lower", "upper"):
        n_vals = [p[0] for p in pairs if p[1] == side]
        gaps = [p[2] for p in pairs if p[1] == side]
        rhos[side] = float(spearmanr(n_vals, gaps).statistic)
    worst = max(rhos.values())
    return PropertyResult("oracle_gap_spearman", worst, -0.5, worst <= -0.5,
                          f"(lower={rhos['lower']:.3f} upper={rhos['upper']:.3f})")


CHECKS: dict[str, Callable[[], list[PropertyResult] | PropertyResult]] = {
    "analytic_vs_numeric": check_analytic_numeric,
    "sharpness": check_sharpness,
    "fna": check_fna,
    "enclosure": check_enclosure,
    "mean_zero": check_mean_zero,
    "orthogonality": check_orthogonality,
    "gamma_zero": check_gamma_zero,
}
SLOW_CHECKS: dict[str, Callable[[], PropertyResult]] = {
    "learner_ordering": check_learner_ordering,
    "oracle_gap": check_oracle_gap,
}


def run_checks(names: list[str] | None = None, full: bool = False) -> list[PropertyResult]:
    table = dict(CHECKS, **(SLOW_CHECKS if full else {}))
    selected = names or list(table)
    unknown = set(selected) - set(CHECKS) - set(SLOW_CHECKS)
    if unknown:
        raise KeyError(f"unknown checks: {sorted(unknown)}")
    results: list[PropertyResult] = []
    for name in selected:
        fn = table.get(name) or SLOW_CHECKS[name]
        t0 = time.perf_counter()
        out = fn()
        dt = time.perf_counter() - t0
        for r in out if isinstance(out, list) else [out]:
            results.append(replace(r, seconds=dt))
    return results
