import numpy as np
import pytest

from growthiv.diagnostics import (ap_partial_f, chi2_sf, f_sf, hansen_j,
                                  hausman, kp_wald_f, underid_test)
from growthiv.estimators import (DesignMatrices, EstimationError, cluster_cov,
                                 fit_iv_gmm, fit_liml, fit_ols)

from test_estimators import make_design


def classical_first_stage_f(d):
    """Oracle: conventional F for joint significance of Z_excl in the
    regression of the single endogenous regressor on [X_exog, Z_excl]."""
    x = d.X_endog[:, 0]
    full = np.column_stack([d.X_exog, d.Z_excl])
    rss0 = np.sum((x - d.X_exog @ np.linalg.lstsq(d.X_exog, x, rcond=None)[0]) ** 2)
    rss1 = np.sum((x - full @ np.linalg.lstsq(full, x, rcond=None)[0]) ** 2)
    m = d.Z_excl.shape[1]
    dof = d.n - full.shape[1]
    return (rss0 - rss1) / m / (rss1 / dof)


class TestTails:
    def test_chi2_monotone_and_bounded(self):
        vals = [chi2_sf(x, 3) for x in (0.0, 1.0, 5.0, 20.0)]
        assert vals[0] == pytest.approx(1.0, abs=1e-12)
        assert all(0.0 <= v <= 1.0 for v in vals)
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_f_sf_against_known_value(self):
        # F(1, dfd) upper tail at t^2 equals two-sided t probability
        import scipy.stats
        assert f_sf(4.0, 1, 50) == pytest.approx(
            float(scipy.stats.f.sf(4.0, 1, 50)), abs=1e-12)


class TestKPWaldF:
    def test_nonrobust_equals_classical_first_stage_f(self):
        rng = np.random.default_rng(20)
        d = make_design(rng, n=300, k1=1, k2=3, m=4, pi=0.8)
        f_kp = kp_wald_f(d, robust=False)
        assert f_kp == pytest.approx(classical_first_stage_f(d), rel=1e-6)

    def test_irrelevant_instruments_small_f(self):
        # 4 endogenous on 8 irrelevant instruments, the Philippines shape
        hits = 0
        for rep in range(100):
            rng = np.random.default_rng(1000 + rep)
            n = 5000
            Xex = np.ones((n, 1))
            Z = rng.normal(size=(n, 8))
            X = rng.normal(size=(n, 4))
            y = X @ np.ones(4) + rng.normal(size=n)
            d = DesignMatrices(y=y, X_endog=X, X_exog=Xex, Z_excl=Z,
                               cluster_ids=np.arange(n) % 500)
            if kp_wald_f(d) < 2.0:
                hits += 1
        assert hits >= 95

    def test_scale_invariance(self):
        rng = np.random.default_rng(21)
        d = make_design(rng, k1=2, m=4)
        scale = np.ones(4)
        scale[2] = 37.5
        d2 = DesignMatrices(y=d.y, X_endog=d.X_endog, X_exog=d.X_exog,
                            Z_excl=d.Z_excl * scale, cluster_ids=d.cluster_ids)
        assert kp_wald_f(d2) == pytest.approx(kp_wald_f(d), rel=1e-8)

    def test_invertible_mix_invariance(self):
        rng = np.random.default_rng(22)
        d = make_design(rng, k1=2, m=4)
        R = rng.normal(size=(4, 4)) + 4 * np.eye(4)
        d2 = DesignMatrices(y=d.y, X_endog=d.X_endog, X_exog=d.X_exog,
                            Z_excl=d.Z_excl @ R, cluster_ids=d.cluster_ids)
        assert kp_wald_f(d2) == pytest.approx(kp_wald_f(d), rel=1e-8)


class TestUnderid:
    def test_relevant_instruments_reject(self):
        rng = np.random.default_rng(23)
        d = make_design(rng, n=5000, k1=2, m=4, pi=0.6, n_clusters=500)
        _, df, p = underid_test(d)
        assert df == 4 - 2 + 1
        assert p < 0.01

    def test_size_under_irrelevance(self):
        # k1 = 1 and totally irrelevant instruments put the test exactly on
        # its null, so p-values should be near-uniform
        rejections = 0
        for rep in range(200):
            rng = np.random.default_rng(3000 + rep)
            n = 2000
            Z = rng.normal(size=(n, 3))
            x = rng.normal(size=n)
            y = x + rng.normal(size=n)
            d = DesignMatrices(y=y, X_endog=x, X_exog=np.ones((n, 1)),
                               Z_excl=Z, cluster_ids=np.arange(n) % 250)
            _s, _df, p = underid_test(d)
            rejections += p < 0.05
        assert 0.01 <= rejections / 200 <= 0.12

    def test_invertible_transform_identical_stat(self):
        rng = np.random.default_rng(24)
        d = make_design(rng, k1=1, m=3)
        R = rng.normal(size=(3, 3)) + 3 * np.eye(3)
        d2 = DesignMatrices(y=d.y, X_endog=d.X_endog, X_exog=d.X_exog,
                            Z_excl=d.Z_excl @ R, cluster_ids=d.cluster_ids)
        s1, _, _ = underid_test(d)
        s2, _, _ = underid_test(d2)
        assert s2 == pytest.approx(s1, rel=1e-8)

    def test_shared_intermediate_with_kp(self):
        # both rank tests must be built from the same reduced form: the
        # nonrobust LM is n * sum of smallest squared canonical correlations
        rng = np.random.default_rng(25)
        d = make_design(rng, n=400, k1=1, k2=2, m=3)
        lm, _, _ = underid_test(d, robust=False)
        from growthiv.linalg import partial_out
        Xt = partial_out(d.X_exog, d.X_endog)
        Zt = partial_out(d.X_exog, d.Z_excl)
        # canonical correlations via SVD of the whitened cross-moment
        qx, _ = np.linalg.qr(Xt)
        qz, _ = np.linalg.qr(Zt)
        cc = np.linalg.svd(qz.T @ qx, compute_uv=False)
        assert lm == pytest.approx(d.n * cc.min() ** 2, rel=1e-8)


class TestHansenJ:
    def test_transform_invariance(self):
        rng = np.random.default_rng(26)
        d = make_design(rng, k1=1, m=3)
        fit = cluster_cov(fit_liml(d), d)
        R = rng.normal(size=(3, 3)) + 3 * np.eye(3)
        d2 = DesignMatrices(y=d.y, X_endog=d.X_endog, X_exog=d.X_exog,
                            Z_excl=d.Z_excl @ R, cluster_ids=d.cluster_ids)
        fit2 = fit_liml(d2)
        s1, df1, _, _ = hansen_j(fit, d)
        # same fit point: LIML invariant to instrument mixing, so residuals match
        s2, df2, _, _ = hansen_j(fit2, d2)
        assert df1 == df2 == 2
        assert s2 == pytest.approx(s1, rel=1e-8)

    def test_exactly_identified_rejected(self):
        rng = np.random.default_rng(27)
        d = make_design(rng, k1=2, m=2)
        fit = fit_iv_gmm(d)
        with pytest.raises(EstimationError, match="exactly-identified"):
            hansen_j(fit, d)


def ap_recipe_oracle(d, j):
    """Literal step-by-step implementation of the per-regressor first-stage
    procedure, written independently with explicit projector matrices."""
    n = d.n
    Zfull = np.column_stack([d.X_exog, d.Z_excl])
    P = Zfull @ np.linalg.pinv(Zfull)
    others = [i for i in range(d.X_endog.shape[1]) if i != j]
    xhat_others = P @ d.X_endog[:, others]
    C = np.column_stack([d.X_exog, xhat_others])
    M = np.eye(n) - C @ np.linalg.pinv(C)
    xj = M @ d.X_endog[:, j]
    Zt = M @ d.Z_excl
    m = d.Z_excl.shape[1]
    r = m - len(others)
    # basis of the partialled instrument space (first r independent columns)
    cols, basis = [], []
    for c in range(m):
        v = Zt[:, c].copy()
        for b in basis:
            v -= b * (b @ v)
        if np.linalg.norm(v) > 1e-10 * np.linalg.norm(d.Z_excl):
            cols.append(c)
            basis.append(v / np.linalg.norm(v))
        if len(cols) == r:
            break
    B = Zt[:, cols]
    pi = np.linalg.solve(B.T @ B, B.T @ xj)
    resid = xj - B @ pi
    scores = B * resid[:, None]
    uniq = np.unique(d.cluster_ids)
    S = np.vstack([scores[d.cluster_ids == g].sum(axis=0) for g in uniq])
    G = np.linalg.inv(B.T @ B)
    V = G @ (S.T @ S) @ G
    wald = pi @ np.linalg.solve(V, pi)
    return wald / r


class TestAPPartialF:
    def test_single_endogenous_equals_robust_first_stage_f(self):
        rng = np.random.default_rng(28)
        d = make_design(rng, n=250, k1=1, m=3)
        assert ap_partial_f(d, 0) == pytest.approx(kp_wald_f(d), rel=1e-8)

    def test_perfect_first_stage_huge(self):
        rng = np.random.default_rng(29)
        n = 100
        Z = rng.normal(size=(n, 2))
        x = Z @ np.array([1.0, -0.5])          # exact linear combination
        y = x + rng.normal(size=n)
        d = DesignMatrices(y=y, X_endog=x, X_exog=np.ones((n, 1)), Z_excl=Z,
                           cluster_ids=np.arange(n) % 10)
        assert ap_partial_f(d, 0) > 1e6

    def test_two_endogenous_matches_procedural_oracle(self):
        rng = np.random.default_rng(30)
        d = make_design(rng, n=60, k1=2, k2=2, m=4, n_clusters=12)
        for j in (0, 1):
            assert ap_partial_f(d, j) == pytest.approx(ap_recipe_oracle(d, j),
                                                       rel=1e-9)


class TestHausman:
    def test_identical_fits_zero_stat(self):
        rng = np.random.default_rng(31)
        d = make_design(rng, k1=1, m=1)
        ols = cluster_cov(fit_ols(d), d)
        stat, df, p, _ = hausman(ols, ols)
        assert stat == pytest.approx(0.0, abs=1e-12)
        assert df == 1
        assert p == pytest.approx(1.0)

    def test_mismatched_names_rejected(self):
        rng = np.random.default_rng(32)
        d1 = make_design(rng, k1=1, m=1)
        d2 = DesignMatrices(y=d1.y, X_endog=d1.X_endog, X_exog=d1.X_exog,
                            Z_excl=d1.Z_excl, cluster_ids=d1.cluster_ids,
                            endog_names=("other",))
        ols = cluster_cov(fit_ols(d1), d1)
        iv = cluster_cov(fit_iv_gmm(d2), d2)
        with pytest.raises(EstimationError, match="names"):
            hausman(ols, iv)

    def test_strong_endogeneity_detected(self):
        rng = np.random.default_rng(33)
        d = make_design(rng, n=2000, k1=1, m=2, rho=0.8, pi=1.0,
                        n_clusters=200)
        ols = cluster_cov(fit_ols(d), d)
        iv = cluster_cov(fit_liml(d), d)
        _, _, p, _ = hausman(ols, iv)
        assert p < 0.01
