import numpy as np
import pytest
from scipy.optimize import linprog
from scipy.stats import norm

from cdte.bench import coupling_oracle
from cdte.dist import EvalGrid, GridCdf, GridQuantile, invert_cdf
from cdte.makarov import (
    ArgOpt,
    BoundsPair,
    DiscreteDist,
    analytic_normal_bounds,
    analytic_normal_quantile_bounds,
    cdf_bound_table,
    cdf_bounds,
    cdf_bounds_mixed,
    fna_bounds,
    inf_convolution,
    quantile_bounds,
    sup_convolution,
)

CAND = np.linspace(-6, 7, 2001)
PHI = norm.cdf


def grid(n_delta=50, n_alpha=50, n_d=2001, d=(-4, 4), y=(-8, 8)):
    return EvalGrid.uniform(d, y, n_delta, n_alpha, n_d)


class TestTypes:
    def test_argopt_needs_members(self):
        with pytest.raises(ValueError):
            ArgOpt(0.0, ())

    def test_argopt_smallest_member(self):
        assert ArgOpt(1.0, (-1.0, 2.0)).arg == -1.0
        with pytest.raises(ValueError):
            ArgOpt(1.0, (2.0, -1.0))

    def test_discrete_pmf_must_sum_to_one(self):
        with pytest.raises(ValueError):
            DiscreteDist([0, 1], [0.5, 0.6])

    def test_discrete_pmf_positive(self):
        with pytest.raises(ValueError):
            DiscreteDist([0, 1], [0.0, 1.0])

    def test_discrete_cdf_left_and_right(self):
        d = DiscreteDist.bernoulli(0.3)
        assert d.cdf(0.0) == pytest.approx(0.7)
        assert d.cdf_left(0.0) == 0.0

    def test_bounds_pair_order(self):
        g = [0.0, 1.0]
        with pytest.raises(ValueError):
            BoundsPair.from_arrays(g, [0.0, 0.9], [0.0, 0.5])
        with pytest.raises(ValueError):
            BoundsPair.from_arrays([0.25, 0.75], [0.0, 0.1], [0.5, 0.6], kind="quantile")

    def test_bounds_pair_kind_mismatch(self):
        with pytest.raises(TypeError):
            BoundsPair(GridCdf([0, 1], [0, 1]), GridQuantile([0.5, 0.6], [0, 1]), "cdf")


class TestConvolutions:
    def test_identical_marginals(self):
        assert sup_convolution(PHI, PHI, 0.0, CAND).opt_value == pytest.approx(0.0, abs=1e-12)
        assert inf_convolution(PHI, PHI, 0.0, CAND).opt_value == pytest.approx(0.0, abs=1e-12)

    def test_shifted_normal_extremum(self):
        # F1 - F0 for a unit location shift never exceeds 0; its extremum at the midpoint is the minimum
        f1 = lambda y: PHI(np.asarray(y) - 1)
        res = inf_convolution(f1, PHI, 0.0, CAND)
        assert res.opt_value == pytest.approx(-0.3829, abs=1e-3)
        assert res.arg == pytest.approx(0.5, abs=1e-2)
        assert sup_convolution(f1, PHI, 0.0, CAND).opt_value == pytest.approx(0.0, abs=1e-6)

    def test_sup_positive_shift(self):
        res = sup_convolution(PHI, PHI, 2.0, CAND)
        assert res.opt_value == pytest.approx(0.6827, abs=1e-3)
        assert res.arg == pytest.approx(1.0, abs=1e-2)

    def test_inf_negative_shift(self):
        res = inf_convolution(PHI, PHI, -2.0, CAND)
        assert res.opt_value == pytest.approx(-0.6827, abs=1e-3)
        assert res.arg == pytest.approx(-1.0, abs=1e-2)

    def test_inf_positive_shift_in_tails(self):
        res = inf_convolution(PHI, PHI, 2.0, CAND)
        assert res.opt_value == pytest.approx(0.0, abs=1e-6)
        assert abs(res.arg) > 4

    def test_empty_candidates(self):
        with pytest.raises(ValueError):
            sup_convolution(PHI, PHI, 0.0, [])

    def test_ties_all_reported(self):
        step = lambda y: (np.asarray(y) >= 0).astype(float)
        res = sup_convolution(step, lambda y: np.zeros_like(np.asarray(y, dtype=float)), 0.0, [-1, 0, 1, 2])
        assert res.arg_set == (0.0, 1.0, 2.0)

    def test_deterministic(self):
        a = sup_convolution(PHI, PHI, 1.3, CAND)
        b = sup_convolution(PHI, PHI, 1.3, CAND)
        assert a == b


class TestCdfBounds:
    def test_values(self):
        g = EvalGrid([-2.0, 0.0, 2.0], [0.25, 0.5], np.linspace(-6, 7, 2001))
        b = cdf_bounds(PHI, PHI, g)
        np.testing.assert_allclose(b.lower_values, [0.0, 0.0, 0.6827], atol=1e-3)
        np.testing.assert_allclose(b.upper_values, [0.3173, 1.0, 1.0], atol=1e-3)

    def test_valid_cdfs(self):
        f1 = lambda y: norm.cdf(y, 1, 2)
        b = cdf_bounds(f1, PHI, grid())
        assert isinstance(b.lower, GridCdf) and isinstance(b.upper, GridCdf)
        assert np.all(b.lower_values <= b.upper_values)

    def test_batched_table_matches_single(self):
        y = np.linspace(-6, 6, 301)
        delta = np.linspace(-3, 3, 7)
        mus = np.array([-1.0, 0.0, 0.7])
        F1 = norm.cdf(y[None, :] - mus[:, None])
        F0 = norm.cdf(y[None, None, :] - delta[None, :, None])
        F0 = np.broadcast_to(F0, (3, 7, 301))
        table = cdf_bound_table(F1, F0)
        for i, m in enumerate(mus):
            single = cdf_bounds(lambda v, m=m: norm.cdf(v - m), PHI, EvalGrid(delta, [0.25, 0.5], y))
            np.testing.assert_allclose(table.lower[i], single.lower_values)
            np.testing.assert_allclose(table.upper[i], single.upper_values)


class TestQuantileBounds:
    def test_alpha_example(self):
        g = EvalGrid([0.0, 1.0], [0.5, 0.6827], [0.0, 1.0], u_grid=(np.arange(2000) + 0.5) / 2000)
        b = quantile_bounds(norm.ppf, norm.ppf, g)
        assert b.lower_values[1] == pytest.approx(2.0, abs=5e-3)

    def test_antisymmetry_at_half(self):
        g = EvalGrid([0.0, 1.0], [0.25, 0.5], [0.0, 1.0], u_grid=(np.arange(2000) + 0.5) / 2000)
        b = quantile_bounds(norm.ppf, norm.ppf, g)
        assert b.upper_values[1] == pytest.approx(-b.lower_values[1], abs=5e-3)

    def test_point_mass(self):
        const = lambda u: np.full(np.shape(u), 3.0)
        b = quantile_bounds(const, const, grid())
        np.testing.assert_array_equal(b.lower_values, 0.0)
        np.testing.assert_array_equal(b.upper_values, 0.0)

    def test_ordering(self):
        b = quantile_bounds(lambda u: norm.ppf(u, 1, 2), norm.ppf, grid())
        assert np.all(b.upper_values <= b.lower_values)

    def test_matches_analytic(self):
        g = EvalGrid([0.0, 1.0], np.linspace(0.05, 0.95, 19), [0.0, 1.0], u_grid=(np.arange(4000) + 0.5) / 4000)
        b = quantile_bounds(lambda u: norm.ppf(u, 0.5), norm.ppf, g)
        lo, up = analytic_normal_quantile_bounds(0.5, 0.0, 1.0, g.alpha_grid)
        np.testing.assert_allclose(b.lower_values, lo, atol=1e-2)
        np.testing.assert_allclose(b.upper_values, up, atol=1e-2)

    def test_dual_forms_agree(self):
        g = grid(n_delta=401, d=(-6, 6))
        cdf_b = cdf_bounds(PHI, PHI, g)
        q_b = quantile_bounds(norm.ppf, norm.ppf, g)
        cell = g.delta_grid[1] - g.delta_grid[0]
        inv_lower = invert_cdf(cdf_b.lower, g.alpha_grid)
        inv_upper = invert_cdf(cdf_b.upper, g.alpha_grid)
        inner = (g.alpha_grid > 0.05) & (g.alpha_grid < 0.95)
        assert np.max(np.abs(inv_lower - q_b.lower_values)[inner]) <= 2 * cell
        assert np.max(np.abs(inv_upper - q_b.upper_values)[inner]) <= 2 * cell


class TestMixed:
    def test_point_masses(self):
        a, b = DiscreteDist([2.0], [1.0]), DiscreteDist([0.5], [1.0])
        assert cdf_bounds_mixed(a, b, 1.5) == (1.0, 1.0)
        assert cdf_bounds_mixed(a, b, 2.0) == (1.0, 1.0)
        assert cdf_bounds_mixed(a, b, 1.4) == (0.0, 0.0)

    def test_fair_coins(self):
        half = DiscreteDist.bernoulli(0.5)
        lo, up = cdf_bounds_mixed(half, half, -1.0)
        assert (lo, up) == pytest.approx((0.0, 0.5))

    def test_fna_example(self):
        lo, up = cdf_bounds_mixed(DiscreteDist.bernoulli(0.3), DiscreteDist.bernoulli(0.6), -1.0)
        assert (lo, up) == pytest.approx((0.3, 0.6))

    def test_sharp_against_linprog(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            m, n = rng.integers(1, 5, size=2)
            d1 = DiscreteDist(np.sort(rng.choice(8, m, replace=False)).astype(float), rng.dirichlet(np.ones(m)))
            d0 = DiscreteDist(np.sort(rng.choice(8, n, replace=False)).astype(float), rng.dirichlet(np.ones(n)))
            delta = float(rng.integers(-4, 5))
            c = (d1.support[:, None] - d0.support[None, :] <= delta).astype(float).ravel()
            A = np.zeros((m + n, m * n))
            for i in range(m):
                A[i, i * n:(i + 1) * n] = 1
            for j in range(n):
                A[m + j, j::n] = 1
            beq = np.concatenate([d1.pmf, d0.pmf])
            lo = linprog(c, A_eq=A, b_eq=beq, bounds=(0, None)).fun
            hi = -linprog(-c, A_eq=A, b_eq=beq, bounds=(0, None)).fun
            assert coupling_oracle(d1, d0, delta) == pytest.approx((lo, hi), abs=1e-8)
            assert cdf_bounds_mixed(d1, d0, delta) == pytest.approx((lo, hi), abs=1e-8)


class TestFna:
    def test_nonnegative_effect(self):
        assert fna_bounds([0.2, 0.4], [0.3, 0.9])[0] == 0.0

    def test_single_row(self):
        assert fna_bounds([0.6], [0.3]) == pytest.approx((0.3, 0.6))

    def test_matches_mixed(self):
        rng = np.random.default_rng(5)
        m0, m1 = rng.uniform(0.01, 0.99, 20), rng.uniform(0.01, 0.99, 20)
        rows = [cdf_bounds_mixed(DiscreteDist.bernoulli(b), DiscreteDist.bernoulli(a), -1.0) for a, b in zip(m0, m1)]
        assert fna_bounds(m0, m1) == pytest.approx(tuple(np.mean(rows, axis=0)), abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            fna_bounds([1.2], [0.3])


class TestAnalytic:
    def test_at_cate(self):
        assert analytic_normal_bounds(1.3, 0.2, 0.7, 1.1) == (0.0, 1.0)

    def test_values(self):
        assert analytic_normal_bounds(0.0, 0.0, 1.0, 2.0) == pytest.approx((0.6827, 1.0), abs=1e-4)
        assert analytic_normal_bounds(0.0, 0.0, 1.0, -2.0) == pytest.approx((0.0, 0.3173), abs=1e-4)

    def test_sigma_positive(self):
        with pytest.raises(ValueError):
            analytic_normal_bounds(0.0, 0.0, 0.0, 1.0)

    def test_matches_grid(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            tau, sigma, delta = rng.uniform(-2, 2), rng.uniform(0.5, 2), rng.uniform(-4, 4)
            y = np.linspace(-12 * sigma + tau, 12 * sigma + tau, 4001)
            g = EvalGrid([delta, delta + 1], [0.25, 0.5], y)
            b = cdf_bounds(lambda v: norm.cdf(v, tau, sigma), lambda v: norm.cdf(v, 0, sigma), g)
            lo, up = analytic_normal_bounds(tau, 0.0, sigma, delta)
            assert b.lower_values[0] == pytest.approx(lo, abs=1e-3)
            assert b.upper_values[0] == pytest.approx(up, abs=1e-3)
