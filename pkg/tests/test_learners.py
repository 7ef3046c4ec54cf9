import numpy as np
import pytest
from scipy.stats import norm

from cdte.bench import GroundTruth, SynthSetting, generate_synth, mu
from cdte.dist import EvalGrid, cell_widths
from cdte.learners import (
    LearnerConfig,
    PseudoSurface,
    WorkingModel,
    cdf_correction,
    correction_term_cdf,
    correction_term_quantile,
    fit_learner,
    fit_second_stage,
    iptw_fit,
    iptw_weights,
    plugin_bounds,
    predict_bounds,
    pseudo_surface,
    quantile_correction,
    second_stage_loss,
)
from cdte.makarov import analytic_normal_bounds
from cdte.nuisance import DENSITY_FLOOR, FoldNuisance, NuisanceFit, cross_fit

GRID = EvalGrid.uniform((-6, 6), (-12, 12), n_delta=25, n_alpha=20, n_d=400)
ORACLE = GroundTruth("normal").nuisance()


@pytest.fixture(scope="module")
def train():
    return generate_synth(SynthSetting("normal", seed=1), 400)


def cfg(**kw):
    kw.setdefault("eval_grid", GRID)
    kw.setdefault("K", 2)
    return LearnerConfig(**kw)


class TestConfig:
    def test_default_gamma(self):
        assert cfg().effective_gamma == 0.25
        assert cfg(estimand="quantile_bounds").effective_gamma == 0.01

    def test_ca_forces_zero(self):
        assert cfg(learner="ca", gamma=0.7).effective_gamma == 0.0

    def test_gamma_range(self):
        with pytest.raises(ValueError):
            cfg(gamma=1.5)

    def test_unknown_learner(self):
        with pytest.raises(ValueError):
            cfg(learner="dr")


class TestPlugin:
    def test_oracle_matches_analytic(self):
        fit = NuisanceFit.shared(1, ORACLE)
        g = EvalGrid.uniform((-6, 6), (-15, 15), n_delta=30, n_d=3001)
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = np.array([rng.uniform(-2, 2), rng.normal()])
            b = plugin_bounds(fit, x, g)
            lo, up = analytic_normal_bounds(mu(x, 1)[0], mu(x, 0)[0], 1.0, g.delta_grid)
            np.testing.assert_allclose(b.lower_values, lo, atol=2e-3)
            np.testing.assert_allclose(b.upper_values, up, atol=2e-3)

    def test_equal_marginals_uninformative_at_zero(self):
        same = FoldNuisance(ORACLE.propensity, ORACLE.cdf0, ORACLE.cdf0)
        g = EvalGrid([-1.0, 0.0, 1.0], [0.25, 0.75], np.linspace(-15, 15, 1001))
        b = plugin_bounds(NuisanceFit.shared(1, same), [0.3, 0.1], g)
        assert b.lower_values[1] == pytest.approx(0.0, abs=1e-12)
        assert b.upper_values[1] == pytest.approx(1.0, abs=1e-12)

    def test_bad_x_length(self, train):
        _, fit = cross_fit(train, K=1, method="gaussian_loc_scale")
        with pytest.raises(ValueError):
            plugin_bounds(fit, [0.1, 0.2, 0.3], GRID)


class TestIptw:
    def test_hand_weights(self):
        np.testing.assert_allclose(iptw_weights([1, 0], [0.5, 0.25], 1), [2.0, 0.0])
        np.testing.assert_allclose(iptw_weights([1, 0], [0.5, 0.25], 0), [0.0, 4 / 3])

    def test_floor_cap(self):
        w = iptw_weights(np.ones(5), np.full(5, 0.05), 1)
        assert w.max() == pytest.approx(20.0)

    def test_constant_propensity_matches_unweighted(self, train):
        class Half:
            weights = np.zeros(3)

            def predict(self, X, clip=True):
                return np.full(np.atleast_2d(X).shape[0], 0.5)

        _, fit = cross_fit(train, K=1)
        half = FoldNuisance(Half(), fit.full.cdf0, fit.full.cdf1, fit.full.train_rows)
        weighted = iptw_fit(train, NuisanceFit.shared(train.n, half))
        y = np.linspace(-10, 10, 50)[None]
        X = train.X[:5]
        np.testing.assert_allclose(weighted.full.cdf1.cdf(X, y), fit.full.cdf1.cdf(X, y), atol=1e-12)


class TestCorrections:
    def test_inactive(self):
        assert cdf_correction(1, 0.0, 0.5, 1.0, 0.0, 0.3, 0.2, False) == 0.0

    def test_treated_hand(self):
        assert cdf_correction(1, 0.0, 0.5, 1.0, 0.0, 0.3, 0.2, True) == pytest.approx(1.4)

    def test_control_hand(self):
        assert cdf_correction(0, 5.0, 0.5, 1.0, 0.0, 0.3, 0.6, True) == pytest.approx(1.2)

    def test_quantile_hand(self):
        # influence function of a quantile: (u - 1{Y <= q}) / f
        v = quantile_correction(1, 0.0, 0.5, 0.8, 1.0, 0.4, 0.5, 0.0, 0.4)
        assert v == pytest.approx(-1.0)

    def test_quantile_sign_debiases(self):
        # a biased plug-in quantile moves toward the truth after the one-step correction
        rng = np.random.default_rng(0)
        y = rng.standard_normal(200_000)
        u, q_bias = 0.8, norm.ppf(0.8) + 0.2
        corr = quantile_correction(1, y, 1.0 - 1e-12, u, q_bias, norm.pdf(q_bias), u, np.inf, 1.0)
        # control term: a=1 so it vanishes; the treated term estimates q_true - q_bias
        one_step = q_bias + corr.mean()
        assert abs(one_step - norm.ppf(u)) < 0.25 * abs(q_bias - norm.ppf(u))

    def test_quantile_density_floor(self):
        v = quantile_correction(1, 10.0, 0.05, 0.5, 0.0, 0.0, 0.5, 0.0, 1.0)
        assert abs(v) <= (1 / 0.05) / DENSITY_FLOOR

    def test_single_row_cdf_matches_surface(self, train):
        config = cfg(learner="au", gamma=1.0, K=1)
        fit = NuisanceFit.shared(train.n, ORACLE)
        lower, upper = pseudo_surface(train, fit, config)
        for i in (0, 7):
            for j in (3, 12, 20):
                z = (train.X[i], int(train.a[i]), float(train.y[i]))
                c = correction_term_cdf(z, GRID.delta_grid[j], ORACLE, "lower", GRID.y_grid)
                assert c == pytest.approx(lower.correction[i, j], abs=1e-12)
                c = correction_term_cdf(z, GRID.delta_grid[j], ORACLE, "upper", GRID.y_grid)
                assert c == pytest.approx(upper.correction[i, j], abs=1e-12)

    def test_single_row_quantile_matches_surface(self, train):
        config = cfg(learner="au", gamma=1.0, K=1, estimand="quantile_bounds")
        fit = NuisanceFit.shared(train.n, ORACLE)
        lower, _ = pseudo_surface(train, fit, config)
        z = (train.X[2], int(train.a[2]), float(train.y[2]))
        for j in (0, 9, 19):
            c = correction_term_quantile(z, GRID.alpha_grid[j], ORACLE, "lower", GRID)
            assert c == pytest.approx(lower.correction[2, j], abs=1e-9)

    def test_quantile_alpha_range(self):
        with pytest.raises(ValueError):
            correction_term_quantile(([0.0, 0.0], 1, 0.0), 1.0, ORACLE, "lower", GRID)


class TestSurfaces:
    def test_gamma_zero_is_plugin(self, train):
        _, fit = cross_fit(train, K=2)
        lo0, up0 = pseudo_surface(train, fit, cfg(learner="au", gamma=0.0))
        ca_lo, ca_up = pseudo_surface(train, fit, cfg(learner="ca"))
        np.testing.assert_array_equal(lo0.values, lo0.plugin)
        np.testing.assert_array_equal(lo0.values, ca_lo.values)
        np.testing.assert_array_equal(up0.values, ca_up.values)
        assert not lo0.invalid_rows().any() and not up0.invalid_rows().any()

    def test_gamma_one_invalid_rows(self, train):
        _, fit = cross_fit(train, K=2)
        lo, up = pseudo_surface(train, fit, cfg(learner="au", gamma=1.0))
        assert lo.invalid_rows().sum() + up.invalid_rows().sum() > 0

    def test_column_means_near_truth(self):
        data = generate_synth(SynthSetting("normal", seed=5), 10_000)
        fit = NuisanceFit.shared(data.n, ORACLE)
        lo, _ = pseudo_surface(data, fit, cfg(learner="au", gamma=1.0, K=1))
        truth, _ = GroundTruth("normal").bounds(data.X, GRID)
        # plugin equals truth up to grid error under oracle nuisances; the corrected mean stays within 3 SE
        se = lo.values.std(axis=0, ddof=1) / np.sqrt(data.n)
        gap = np.abs(lo.values.mean(axis=0) - truth.mean(axis=0))
        assert np.all(gap <= 3 * se + 5e-3)

    def test_deterministic(self, train):
        _, fit = cross_fit(train, K=2)
        a = pseudo_surface(train, fit, cfg(gamma=1.0))[0].values
        b = pseudo_surface(train, fit, cfg(gamma=1.0))[0].values
        assert a.tobytes() == b.tobytes()

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            PseudoSurface(np.array([[np.nan, 1.0]]), np.zeros((1, 2)), 0.0, "lower", "cdf", np.array([0.0, 1.0]))


class TestSecondStage:
    def test_constant_surface(self, train):
        n, g = train.n, GRID.delta_grid
        s = PseudoSurface(np.full((n, g.size), 0.35), np.zeros((n, g.size)), 0.0, "lower", "cdf", g)
        model = fit_second_stage(s, train.X, cfg())
        np.testing.assert_allclose(model.predict(np.random.default_rng(0).normal(size=(10, 2))), 0.35, atol=1e-10)

    def test_zero_rows(self):
        g = GRID.delta_grid
        s = PseudoSurface(np.zeros((0, g.size)), np.zeros((0, g.size)), 0.0, "lower", "cdf", g)
        with pytest.raises(ValueError):
            fit_second_stage(s, np.zeros((0, 2)), cfg())

    def test_predictions_in_class(self, train):
        _, fit = cross_fit(train, K=2)
        lo, _ = pseudo_surface(train, fit, cfg(gamma=1.0))
        pred = fit_second_stage(lo, train.X, cfg()).predict(np.random.default_rng(1).normal(size=(50, 2)) * 3)
        assert np.all(np.diff(pred, axis=1) >= 0) and pred.min() >= 0 and pred.max() <= 1

    def test_loss_decomposition(self, train):
        _, fit = cross_fit(train, K=2)
        lo, _ = pseudo_surface(train, fit, cfg(gamma=1.0))
        model = fit_second_stage(lo, train.X, cfg())
        resid = lo.values - model.predict_raw(train.X)
        w = cell_widths(GRID.delta_grid)
        manual = sum(np.mean(resid[:, j] ** 2) * w[j] for j in range(w.size))
        assert second_stage_loss(lo, model, train.X) == pytest.approx(manual, abs=1e-10)

    def test_constant_pair(self, train):
        n, g = train.n, GRID.delta_grid
        mk = lambda c, side: fit_second_stage(
            PseudoSurface(np.full((n, g.size), c), np.zeros((n, g.size)), 0.0, side, "cdf", g), train.X, cfg()
        )
        lo, up, k = predict_bounds(mk(0.2, "lower"), mk(0.8, "upper"), train.X[:3])
        np.testing.assert_allclose(lo, 0.2)
        np.testing.assert_allclose(up, 0.8)
        assert k == 0

    def test_crossing_swap(self):
        def model(v, side):
            w = np.zeros((1, 1))
            w[0, 0] = v
            return WorkingModel(w, np.zeros(1), np.ones(1), 1, side, "cdf", np.array([0.0]))

        # degree 1 with one covariate has two features; pad the weights accordingly
        lo_m = model(0.6, "lower")
        lo_m = WorkingModel(np.array([[0.6], [0.0]]), lo_m.x_mean, lo_m.x_scale, 1, "lower", "cdf", lo_m.grid)
        up_m = WorkingModel(np.array([[0.4], [0.0]]), lo_m.x_mean, lo_m.x_scale, 1, "upper", "cdf", lo_m.grid)
        lo, up, k = predict_bounds(lo_m, up_m, np.zeros((1, 1)))
        assert (lo[0, 0], up[0, 0], k) == pytest.approx((0.4, 0.6, 1))

    def test_kind_mismatch(self):
        a = WorkingModel(np.zeros((2, 2)), np.zeros(1), np.ones(1), 1, "lower", "cdf", np.array([0.0, 1.0]))
        b = WorkingModel(np.zeros((2, 2)), np.zeros(1), np.ones(1), 1, "upper", "quantile", np.array([0.0, 1.0]))
        with pytest.raises(ValueError):
            predict_bounds(a, b, np.zeros((1, 1)))


class TestEndToEnd:
    @pytest.mark.parametrize("learner", ["plugin", "iptw", "ca", "au"])
    def test_learners_produce_valid_pairs(self, train, learner):
        fitted = fit_learner(train, cfg(learner=learner))
        pairs = fitted.predict_pairs(train.X[:4])
        assert len(pairs) == 4

    def test_quantile_estimand(self, train):
        fitted = fit_learner(train, cfg(estimand="quantile_bounds"))
        lo, up, _ = fitted.predict(train.X[:10])
        assert np.all(up <= lo)

    def test_au_gamma_zero_equals_ca(self, train):
        a = fit_learner(train, cfg(learner="au", gamma=0.0)).predict(train.X[:20])
        b = fit_learner(train, cfg(learner="ca")).predict(train.X[:20])
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    @pytest.mark.xfail(strict=True, reason="degree-2 working model cannot represent the sinusoidal CATE")
    def test_oracle_pipeline_sup_norm_to_truth(self):
        gt = GroundTruth("normal")
        data = generate_synth(SynthSetting("normal", seed=3), 5000)
        fitted = fit_learner(data, cfg(learner="au", K=1), nuisance=gt.oracle_fit(data.n))
        X = generate_synth(SynthSetting("normal", seed=3, stream=1), 200).X
        lo, up, _ = fitted.predict(X)
        t_lo, t_up = gt.bounds(X, GRID)
        assert np.max(np.abs(lo - t_lo)) < 0.05 and np.max(np.abs(up - t_up)) < 0.05

    def test_oracle_pipeline_estimation_error_shrinks(self):
        # distance to the best in-class fit (CA on oracle nuisances) isolates estimation error
        gt = GroundTruth("normal")
        X = generate_synth(SynthSetting("normal", seed=0, stream=1), 200).X
        errs = {}
        for n in (1000, 5000):
            gaps = []
            for seed in range(3):
                data = generate_synth(SynthSetting("normal", seed=seed), n)
                fit = gt.oracle_fit(n)
                au = fit_learner(data, cfg(learner="au", K=1), nuisance=fit).predict(X)
                ref = fit_learner(data, cfg(learner="ca", K=1), nuisance=fit).predict(X)
                gaps.append(max(np.max(np.abs(au[0] - ref[0])), np.max(np.abs(au[1] - ref[1]))))
            errs[n] = np.mean(gaps)
        assert errs[5000] < errs[1000]
