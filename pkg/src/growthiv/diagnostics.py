"""Specification test statistics: Hansen-J, rank tests, AP partial F, Hausman.

The weak-instrument and under-identification statistics are rank tests on the
reduced-form coefficient matrix, computed in the canonical-correlation metric
(instruments and endogenous regressors standardized to unit second-moment
matrices after partialling out the exogenous controls). That metric makes the
statistics exactly invariant to invertible re-combinations of the instrument
block. With an i.i.d. weight the Wald form collapses to the Cragg-Donald
statistic and the LM form to the canonical-correlation statistic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.special

from .estimators import DesignMatrices, EstimationError, FitResult
from .linalg import (cluster_sums, partial_out, project_on, psd_quadform,
                     sequential_rank_keep, solve_ls, sym_inv_sqrt, symmetrize)


def chi2_sf(x: float, df: int) -> float:
    """Upper-tail chi-square probability via the regularized incomplete gamma."""
    if df <= 0:
        return float("nan")
    return float(scipy.special.gammaincc(df / 2.0, max(x, 0.0) / 2.0))


def f_sf(x: float, dfn: int, dfd: int) -> float:
    """Upper-tail F probability via the regularized incomplete beta."""
    if dfn <= 0 or dfd <= 0:
        return float("nan")
    x = max(x, 0.0)
    return float(scipy.special.betainc(dfd / 2.0, dfn / 2.0,
                                       dfd / (dfd + dfn * x)))


@dataclass(frozen=True)
class DiagnosticsReport:
    """The five per-specification test statistics.

    Hansen-J fields are None when the specification is exactly identified.
    """

    kp_wald_f: float
    underid_stat: float
    underid_df: int
    underid_p: float
    ap_partial_f: dict[str, float]
    hj_stat: float | None = None
    hj_df: int | None = None
    hj_p: float | None = None
    hausman_stat: float | None = None
    hausman_df: int | None = None
    hausman_p: float | None = None
    hj_singular: bool = False
    hausman_pinv: bool = False


# ---------------------------------------------------------------------------
# Hansen J


def hansen_j(fit: FitResult, d: DesignMatrices) -> tuple[float, int, float, bool]:
    """Over-identification test (Z'u)' S^-1 (Z'u) with cluster-robust S.

    Returns (stat, df, p, s_singular_flag). Requires m > k1.
    """
    if fit.method == "ols":
        raise EstimationError("hansen_j needs an IV or LIML fit")
    Zp, _ = d.pruned_instruments()
    m = Zp.shape[1]
    if m <= d.k1:
        raise EstimationError("hansen_j undefined for exactly-identified models")
    Z = np.column_stack([d.X_exog, Zp])
    g = Z.T @ fit.residuals
    S = cluster_sums(Z * fit.residuals[:, None], d.cluster_ids)
    Shat = S.T @ S
    singular = False
    try:
        L = scipy.linalg.cholesky(symmetrize(Shat), lower=True)
        x = scipy.linalg.solve_triangular(L, g, lower=True)
        stat = float(x @ x)
    except scipy.linalg.LinAlgError:
        stat = float(g @ scipy.linalg.pinvh(symmetrize(Shat)) @ g)
        singular = True
    df = m - d.k1
    return stat, df, chi2_sf(stat, df), singular


# ---------------------------------------------------------------------------
# Rank tests (weak-instrument Wald F and under-identification LM)


def _kp_rank_stats(d: DesignMatrices, robust: bool = True
                   ) -> tuple[float, float, int, int]:
    """Shared rank-test machinery.

    Returns (wald_stat, lm_stat, df, m_effective); both statistics test
    rank(Pi) = k1 - 1 on the same standardized reduced-form estimate, so the
    intermediate is bit-identical between the two callers.
    """
    Zp, _ = d.pruned_instruments()
    m = Zp.shape[1]
    k1 = d.k1
    if m < k1:
        raise EstimationError(
            f"under-identified: {m} instruments for {k1} endogenous")
    n = d.n
    Xt = partial_out(d.X_exog, d.X_endog)
    Zt = partial_out(d.X_exog, Zp)
    Sz = sym_inv_sqrt(Zt.T @ Zt / n)
    Sx = sym_inv_sqrt(Xt.T @ Xt / n)
    Zb = Zt @ Sz
    Xb = Xt @ Sx
    Theta = Zb.T @ Xb / n                      # m x k1, singular values = canon. corrs
    U, _, Vt = np.linalg.svd(Theta)
    q = k1 - 1
    U2 = U[:, q:]                              # m x (m-q)
    V2 = Vt[q:, :].T                           # k1 x 1
    lam = (U2.T @ Theta @ V2).ravel(order="F")
    K = np.kron(V2.T, U2.T)                    # maps vec(Theta) -> vec(U2'Theta V2)
    E = Xb - Zb @ Theta                        # reduced-form residuals (Zb'Zb = n I)
    df = m - k1 + 1

    def quad(scores: np.ndarray) -> float:
        # scores rows are kron(v_i, zb_i); their mean is vec(Zb'V/n)
        S = cluster_sums(scores, d.cluster_ids)
        W = (S.T @ S) / (n * n)                # covariance estimate of vec(Theta)
        Om = symmetrize(K @ W @ K.T)
        stat, _ = psd_quadform(lam, Om)
        return stat

    def kron_rows(V: np.ndarray) -> np.ndarray:
        return (V[:, :, None] * Zb[:, None, :]).reshape(n, k1 * m)

    if robust:
        wald = quad(kron_rows(E))
        lm = quad(kron_rows(Xb))
    else:
        dof = n - m - d.k2
        Sigma_e = E.T @ E / dof
        W = np.kron(Sigma_e, np.eye(m) / n)
        Om = symmetrize(K @ W @ K.T)
        wald, _ = psd_quadform(lam, Om)
        # i.i.d. LM weight: vec(Theta) has covariance I/n under the null
        lm = float(n * lam @ lam)
    return wald, lm, df, m


def kp_wald_f(d: DesignMatrices, robust: bool = True) -> float:
    """Weak-instrument rank Wald statistic divided by the instrument count.

    The robust form is the Kleibergen-Paap rk Wald F; with robust=False it
    reduces to the conventional first-stage F when k1 == 1.
    """
    wald, _, _, m = _kp_rank_stats(d, robust=robust)
    return wald / m


def underid_test(d: DesignMatrices, robust: bool = True
                 ) -> tuple[float, int, float]:
    """Under-identification rank LM test of rank(Pi) = k1-1 against k1.

    robust=False gives the canonical-correlation form. Returns (stat, df, p).
    """
    _, lm, df, _ = _kp_rank_stats(d, robust=robust)
    return lm, df, chi2_sf(lm, df)


# ---------------------------------------------------------------------------
# Angrist-Pischke partial F


def ap_partial_f(d: DesignMatrices, j: int) -> float:
    """Per-regressor first-stage strength for endogenous column j.

    Replaces the other endogenous regressors by their first-stage fitted
    values, partials them and X_exog out of x_j and the instruments, and
    reports the cluster-robust Wald F for joint instrument significance with
    numerator df m - (k1 - 1).
    """
    Zp, _ = d.pruned_instruments()
    m = Zp.shape[1]
    k1 = d.k1
    if not 0 <= j < k1:
        raise EstimationError(f"endogenous index {j} out of range")
    r = m - (k1 - 1)
    if r <= 0:
        raise EstimationError("AP partial F undefined: m - (k1 - 1) <= 0")
    Zfull = np.column_stack([d.X_exog, Zp])
    others = [i for i in range(k1) if i != j]
    controls = d.X_exog
    if others:
        Xhat_others = project_on(Zfull, d.X_endog[:, others])
        controls = np.column_stack([d.X_exog, Xhat_others])
    xj = partial_out(controls, d.X_endog[:, [j]])[:, 0]
    Zt = partial_out(controls, Zp)
    kept = sequential_rank_keep(Zt)
    B = Zt[:, kept]
    if B.shape[1] < r:
        raise EstimationError("instrument block degenerate after partialling")
    B = B[:, :r]
    pi = solve_ls(B, xj)
    resid = xj - B @ pi
    G = scipy.linalg.inv(symmetrize(B.T @ B))
    S = cluster_sums(B * resid[:, None], d.cluster_ids)
    V = symmetrize(G @ (S.T @ S) @ G)
    wald, _ = psd_quadform(pi, V)
    return wald / r


# ---------------------------------------------------------------------------
# Hausman


def hausman(ols: FitResult, iv: FitResult) -> tuple[float, int, float, bool]:
    """Contrast of OLS and IV endogenous coefficients.

    Returns (stat, df, p, pinv_flag); the middle matrix V_iv - V_ols is
    pseudo-inverted when not positive definite.
    """
    if ols.names != iv.names:
        raise EstimationError("hausman: coefficient names differ between fits")
    if ols.n != iv.n:
        raise EstimationError("hausman: fits use different samples")
    if ols.vcov is None or iv.vcov is None:
        raise EstimationError("hausman needs covariances; call cluster_cov first")
    k1 = iv.k1
    idx = np.arange(k1)
    q = iv.beta[idx] - ols.beta[idx]
    V = (iv.vcov - ols.vcov)[np.ix_(idx, idx)]
    stat, used_pinv = psd_quadform(q, V)
    if not used_pinv:
        # guard against a technically-Cholesky-able but indefinite contrast
        eigs = np.linalg.eigvalsh(symmetrize(V))
        if eigs.min() < 0:
            stat = float(q @ scipy.linalg.pinvh(symmetrize(V)) @ q)
            used_pinv = True
    return stat, k1, chi2_sf(stat, k1), used_pinv


# ---------------------------------------------------------------------------
# Full report


def full_report(fit: FitResult, ols: FitResult | None,
                d: DesignMatrices) -> DiagnosticsReport:
    """All five statistics for one fitted specification."""
    Zp, _ = d.pruned_instruments()
    m = Zp.shape[1]
    over_identified = m > d.k1
    hj = (None, None, None, False)
    if over_identified and fit.method != "ols":
        hj = hansen_j(fit, d)
    wald, lm, df, m_eff = _kp_rank_stats(d, robust=True)
    ap = {d.endog_names[j]: ap_partial_f(d, j) for j in range(d.k1)}
    hm = (None, None, None, False)
    if ols is not None and fit.method != "ols":
        hm = hausman(ols, fit)
    return DiagnosticsReport(
        kp_wald_f=wald / m_eff,
        underid_stat=lm, underid_df=df, underid_p=chi2_sf(lm, df),
        ap_partial_f=ap,
        hj_stat=hj[0], hj_df=hj[1], hj_p=hj[2], hj_singular=hj[3],
        hausman_stat=hm[0], hausman_df=hm[1], hausman_p=hm[2],
        hausman_pinv=hm[3])
