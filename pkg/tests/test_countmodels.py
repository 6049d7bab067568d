import math

import numpy as np
import pytest

from growthiv.countmodels import (BATTERY_COVARIATES, Battery, CountDataset,
                                  CountModelError, _Family, fit_count,
                                  fit_window_battery, poisson_pmf,
                                  predict_days, r2_pred, select_model)
from growthiv.synth import make_diarrhea_windows


def intercept_data(y):
    y = np.asarray(y)
    return CountDataset(y=y, X=np.ones((len(y), 1)), names=("const",))


def sim_poisson(rng, n=5000, beta=(0.5, -0.2)):
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    mu = np.exp(X @ np.array(beta))
    return CountDataset(y=rng.poisson(mu), X=X, names=("const", "x"))


class TestPoisson:
    def test_intercept_only_closed_form(self):
        # score equation: intercept = ln(mean); mean 3.5
        y = np.array([3, 4] * 40 + [3])   # mean 3.5061...; use exact mean
        y = np.array([2, 5, 3, 4] * 25)   # mean 3.5 exactly
        fit = fit_count(intercept_data(y), "poisson")
        assert fit.converged
        assert fit.beta[0] == pytest.approx(math.log(3.5), abs=1e-8)
        assert fit.predict_mean(np.ones((1, 1)))[0] == pytest.approx(3.5, abs=1e-7)

    def test_simulation_recovery_within_3se(self):
        rng = np.random.default_rng(50)
        data = sim_poisson(rng)
        fit = fit_count(data, "poisson")
        assert fit.converged
        for b_hat, se, b_true in zip(fit.beta, fit.se, (0.5, -0.2)):
            assert abs(b_hat - b_true) < 3 * se

    def test_pmf_normalization(self):
        ys = np.arange(201)
        for mu in (0.5, 3.0, 12.0, 50.0):
            total = poisson_pmf(ys, mu).sum()
            assert 1 - 1e-8 <= total <= 1.0 + 1e-12

    def test_pmf_at_zero(self):
        assert poisson_pmf(0, 2.0) == pytest.approx(math.exp(-2.0), rel=1e-12)


class TestFamilies:
    def test_zip_inflation_zero_matches_poisson(self):
        rng = np.random.default_rng(51)
        data = sim_poisson(rng, n=500)
        pois = fit_count(data, "poisson")
        zip_fam = _Family("zip", 2)
        theta = np.concatenate([pois.beta, [-40.0]])   # pi = expit(-40) ~ 0
        ll_zip = zip_fam.loglik(theta, data.y, data.X)
        assert ll_zip == pytest.approx(pois.loglik, abs=1e-8)

    def test_nb_to_poisson_nesting(self):
        rng = np.random.default_rng(52)
        data = sim_poisson(rng, n=400)
        pois = fit_count(data, "poisson")
        nb_fam = _Family("negbin", 2)
        theta = np.concatenate([pois.beta, [math.log(1e-8)]])
        assert abs(nb_fam.loglik(theta, data.y, data.X) - pois.loglik) < 1e-3

    def test_bic_identity_exact(self):
        rng = np.random.default_rng(53)
        data = sim_poisson(rng, n=300)
        for family in ("poisson", "negbin", "zip", "zinb"):
            fit = fit_count(data, family)
            assert fit.bic == -2.0 * fit.loglik + fit.k * math.log(fit.n)

    @pytest.mark.parametrize("family", ["poisson", "negbin", "zip", "zinb"])
    def test_gradient_matches_finite_differences(self, family):
        # zero-inflated overdispersed counts so every family has an interior
        # optimum (a boundary alpha would stall below the gradient tolerance)
        rng = np.random.default_rng(54)
        n = 400
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        mu = np.exp(0.9 + 0.3 * X[:, 1])
        r = 1.0 / 0.6
        y = rng.poisson(rng.gamma(shape=r, scale=mu / r))
        y[rng.random(n) < 0.2] = 0
        data = CountDataset(y=y, X=X, names=("const", "x"))
        fit = fit_count(data, family)
        assert fit.converged
        fam = _Family(family, 2)
        theta = fit.theta()
        assert np.abs(fam.grad(theta, y, X)).max() < 1e-6
        # finite differences of the loglik, step 1e-5, relative tol 1e-3
        g = fam.grad(theta, y, X)
        for j in range(len(theta)):
            h = 1e-5
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            fd = (fam.loglik(tp, y, X) - fam.loglik(tm, y, X)) / (2 * h)
            assert fd == pytest.approx(g[j], rel=1e-3, abs=1e-4)

    def test_negbin_recovers_dispersion(self):
        rng = np.random.default_rng(55)
        n = 4000
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        mu = np.exp(1.0 + 0.4 * X[:, 1])
        alpha = 0.8
        r = 1.0 / alpha
        y = rng.poisson(rng.gamma(shape=r, scale=mu / r))
        fit = fit_count(CountDataset(y=y, X=X, names=("const", "x")), "negbin")
        assert fit.converged
        assert fit.alpha == pytest.approx(0.8, rel=0.2)


class TestSelectModel:
    def test_bic_ordering(self):
        rng = np.random.default_rng(56)
        n = 600
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        mu = np.exp(1.0 + 0.3 * X[:, 1])
        r = 1.0 / 0.8
        y = rng.poisson(rng.gamma(shape=r, scale=mu / r))
        data = CountDataset(y=y, X=X, names=("const", "x"))
        pois = fit_count(data, "poisson")
        nb = fit_count(data, "negbin")
        best_bic, _ = select_model([pois, nb], insample=data)
        assert best_bic.bic == min(pois.bic, nb.bic)

    def test_perfect_prediction_r2_one(self):
        # saturated two-group design: fitted group means equal the counts
        x = np.repeat([0.0, 1.0], 40)
        X = np.column_stack([np.ones(80), x])
        y = np.where(x == 0, 3, 7).astype(int)
        data = CountDataset(y=y, X=X, names=("const", "x"))
        fit = fit_count(data, "poisson")
        assert r2_pred(fit, data) == pytest.approx(1.0, abs=1e-9)

    def test_nb_wins_bic_on_nb_data(self):
        wins = 0
        for rep in range(100):
            rng = np.random.default_rng(2000 + rep)
            n = 600
            X = np.column_stack([np.ones(n), rng.normal(size=n)])
            mu = np.exp(1.2 + 0.3 * X[:, 1])
            r = 1.0 / 0.8
            y = rng.poisson(rng.gamma(shape=r, scale=mu / r))
            data = CountDataset(y=y, X=X, names=("const", "x"))
            pois = fit_count(data, "poisson")
            nb = fit_count(data, "negbin")
            if nb.bic < pois.bic:
                wins += 1
        assert wins >= 90

    def test_needs_two_converged(self):
        rng = np.random.default_rng(57)
        data = sim_poisson(rng, n=200)
        fit = fit_count(data, "poisson")
        with pytest.raises(CountModelError):
            select_model([fit], insample=data)


class TestPredictDays:
    def test_intercept_log4(self):
        y = np.array([4] * 30)
        fit = fit_count(intercept_data(y), "poisson")
        assert predict_days(fit, {"const": 1.0}, clamp_max=61) == \
            pytest.approx(4.0, abs=1e-6)

    def test_clamp(self):
        y = np.array([4] * 30)
        fit = fit_count(intercept_data(y), "poisson")
        import dataclasses
        big = dataclasses.replace(fit, beta=np.array([math.log(75.0)]),
                                  coef={"const": math.log(75.0)})
        assert predict_days(big, {"const": 1.0}, clamp_max=61) == 61

    def test_matches_exp_dot_product_oracle(self):
        rng = np.random.default_rng(58)
        data = sim_poisson(rng, n=300)
        fit = fit_count(data, "poisson")
        x = {"const": 1.0, "x": 0.7}
        expected = math.exp(fit.coef["const"] + 0.7 * fit.coef["x"])
        assert predict_days(fit, x, clamp_max=1000) == pytest.approx(expected)

    def test_missing_covariate_rejected(self):
        rng = np.random.default_rng(59)
        fit = fit_count(sim_poisson(rng, n=200), "poisson")
        with pytest.raises(CountModelError, match="missing"):
            predict_days(fit, {"const": 1.0}, clamp_max=61)


@pytest.fixture(scope="module")
def battery():
    windows = make_diarrhea_windows(seed=77, n_per_window=220)
    return fit_window_battery(windows), windows


class TestBattery:
    def test_twelve_windows_converged(self, battery):
        bat, _ = battery
        assert len(bat.windows) == 12
        for w in bat.windows.values():
            assert w.fit is not None and w.fit.converged and not w.flagged

    def test_serialization_roundtrip_identical_predictions(self, battery):
        bat, windows = battery
        text = bat.to_json()
        again = Battery.from_json(text)
        x = bat.covariate_row(np.arange(12, dtype=float), 1.5, 1.0, 2)
        for label in bat.windows:
            p1 = bat.windows[label].predict(x, clamp_max=61)
            p2 = again.windows[label].predict(x, clamp_max=61)
            assert p1 == p2
        assert Battery.from_json(again.to_json()).to_json() == text

    def test_all_zero_window_flagged_degenerate(self):
        n = 60
        data = CountDataset(y=np.zeros(n, dtype=int),
                            X=np.ones((n, 1)), names=("const",),
                            window_label="0-2")
        fit = fit_count(data, "poisson")
        assert fit.degenerate and not fit.converged
        assert fit.predict_mean(np.ones((1, 1)))[0] < 0.05

    def test_scale_factor_applied_to_measures(self):
        bat = Battery([], scale_factor=2.0)
        row = bat.covariate_row(np.ones(12), 0.5, 1.0, 1)
        np.testing.assert_allclose(row[:12], 2.0)
        assert row[-1] == 1.0   # intercept

    def test_covariate_layout(self):
        assert len(BATTERY_COVARIATES) == 18
        assert BATTERY_COVARIATES[-1] == "const"


class TestGuards:
    def test_counts_must_be_integer(self):
        with pytest.raises(CountModelError, match="integer"):
            CountDataset(y=np.array([1.5, 2.0]), X=np.ones((2, 1)),
                         names=("const",))

    def test_negative_counts_rejected(self):
        with pytest.raises(CountModelError):
            CountDataset(y=np.array([-1, 2]), X=np.ones((2, 1)),
                         names=("const",))

    def test_too_few_observations(self):
        data = CountDataset(y=np.array([1]), X=np.ones((1, 1)),
                            names=("const",))
        with pytest.raises(CountModelError, match="too small"):
            fit_count(data, "poisson")

    def test_unknown_family(self):
        y = np.array([1, 2, 3, 4])
        with pytest.raises(CountModelError, match="family"):
            fit_count(intercept_data(y), "weibull")
