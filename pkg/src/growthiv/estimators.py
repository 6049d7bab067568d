"""OLS, exactly-identified IV/GMM, and LIML with cluster-robust covariance.

The regression layout follows the growth estimating equations: the outcome is
a first difference, the endogenous block holds current intakes plus lagged
height and weight, the exogenous block holds the intercept and controls, and
the excluded instruments vary by specification. Coefficient vectors are
ordered [endogenous..., exogenous...].
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .linalg import cluster_sums, sequential_rank_keep, solve_ls, symmetrize


class EstimationError(ValueError):
    """Raised when a design cannot be estimated as requested."""


@dataclass(frozen=True)
class DesignMatrices:
    """Arrays for one specification.

    y: outcome vector (n,)
    X_endog: endogenous regressors (n, k1)
    X_exog: included exogenous regressors incl. intercept (n, k2)
    Z_excl: excluded instruments (n, m)
    cluster_ids: integer cluster labels (n,), one cluster per child
    """

    y: np.ndarray
    X_endog: np.ndarray
    X_exog: np.ndarray
    Z_excl: np.ndarray
    cluster_ids: np.ndarray
    endog_names: tuple[str, ...] = ()
    exog_names: tuple[str, ...] = ()
    instrument_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        n = y.shape[0]
        object.__setattr__(self, "y", y)
        for name in ("X_endog", "X_exog", "Z_excl"):
            M = np.asarray(getattr(self, name), dtype=float)
            if M.ndim == 1:
                M = M.reshape(-1, 1)
            if M.shape[0] != n:
                raise EstimationError(f"{name} has {M.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(M)):
                raise EstimationError(f"non-finite entries in {name}")
            object.__setattr__(self, name, M)
        if not np.all(np.isfinite(y)):
            raise EstimationError("non-finite entries in y")
        cl = np.asarray(self.cluster_ids).reshape(-1)
        if cl.shape[0] != n:
            raise EstimationError("cluster_ids length mismatch")
        object.__setattr__(self, "cluster_ids", cl)
        if n <= self.k1 + self.k2:
            raise EstimationError(f"n={n} too small for k={self.k1 + self.k2}")
        if not self.endog_names:
            object.__setattr__(self, "endog_names",
                               tuple(f"endog_{j}" for j in range(self.k1)))
        if not self.exog_names:
            object.__setattr__(self, "exog_names",
                               tuple(f"exog_{j}" for j in range(self.k2)))
        if not self.instrument_names:
            object.__setattr__(self, "instrument_names",
                               tuple(f"iv_{j}" for j in range(self.m)))
        kept = sequential_rank_keep(self.X_exog)
        if len(kept) < self.k2:
            bad = sorted(set(range(self.k2)) - set(kept))[0]
            raise EstimationError(
                f"exogenous column {self.exog_names[bad]!r} is collinear")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k1(self) -> int:
        return self.X_endog.shape[1]

    @property
    def k2(self) -> int:
        return self.X_exog.shape[1]

    @property
    def m(self) -> int:
        return self.Z_excl.shape[1]

    @property
    def n_clusters(self) -> int:
        return int(np.unique(self.cluster_ids).shape[0])

    def pruned_instruments(self) -> tuple[np.ndarray, list[int]]:
        """Instrument columns that add rank beyond X_exog, in original order.

        Returns the retained columns and the indices of dropped ones.
        """
        kept = sequential_rank_keep(self.Z_excl, base=self.X_exog)
        dropped = [j for j in range(self.m) if j not in kept]
        return self.Z_excl[:, kept], dropped

    def coef_names(self) -> tuple[str, ...]:
        return tuple(self.endog_names) + tuple(self.exog_names)


@dataclass(frozen=True)
class FitResult:
    """Point estimates and (after cluster_cov) a cluster-robust covariance."""

    method: str
    names: tuple[str, ...]
    beta: np.ndarray
    residuals: np.ndarray
    n: int
    k1: int
    k2: int
    m: int
    n_clusters: int
    kappa: float | None = None
    vcov: np.ndarray | None = None
    dropped_instruments: tuple[int, ...] = ()
    coef: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.coef:
            object.__setattr__(
                self, "coef",
                {name: float(b) for name, b in zip(self.names, self.beta)})

    def se(self, name: str) -> float:
        if self.vcov is None:
            raise EstimationError("covariance not attached; call cluster_cov")
        i = self.names.index(name)
        return float(np.sqrt(self.vcov[i, i]))

    def tstat(self, name: str) -> float:
        return self.coef[name] / self.se(name)


def _regressor_matrix(d: DesignMatrices) -> np.ndarray:
    return np.column_stack([d.X_endog, d.X_exog])


def _equilibrated_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve the symmetric system A x = b after diagonal scaling.

    Design columns span many orders of magnitude (kcal, grams, age squared),
    so the raw normal-equations-style systems are poorly scaled; symmetric
    equilibration restores accuracy without changing the solution.
    """
    dscale = np.sqrt(np.abs(np.diag(A)))
    dscale[dscale == 0] = 1.0
    As = symmetrize(A / dscale[:, None] / dscale[None, :])
    xs = scipy.linalg.solve(As, b / dscale, assume_a="sym")
    return xs / dscale


def _finish(d: DesignMatrices, method: str, beta: np.ndarray,
            kappa: float | None = None,
            dropped: tuple[int, ...] = ()) -> FitResult:
    X = _regressor_matrix(d)
    resid = d.y - X @ beta
    return FitResult(method=method, names=d.coef_names(), beta=beta,
                     residuals=resid, n=d.n, k1=d.k1, k2=d.k2, m=d.m,
                     n_clusters=d.n_clusters, kappa=kappa,
                     dropped_instruments=dropped)


def fit_ols(d: DesignMatrices) -> FitResult:
    """Least squares on [X_endog, X_exog]; errors name a dependent column."""
    X = _regressor_matrix(d)
    names = d.coef_names()
    kept = sequential_rank_keep(X)
    if len(kept) < X.shape[1]:
        bad = sorted(set(range(X.shape[1])) - set(kept))[0]
        raise EstimationError(f"rank-deficient design: column {names[bad]!r}")
    col_norm = np.linalg.norm(X, axis=0)
    Q, R = np.linalg.qr(X / col_norm)
    beta = scipy.linalg.solve_triangular(R, Q.T @ d.y) / col_norm
    fit = _finish(d, "ols", beta)
    scale = col_norm * np.linalg.norm(d.y)
    if (np.abs(X.T @ fit.residuals) > 1e-8 * scale).any():
        raise EstimationError("normal equations not satisfied; ill-conditioned design")
    return fit


def fit_iv_gmm(d: DesignMatrices) -> FitResult:
    """Exactly-identified IV: beta = (Z'X)^-1 Z'y with Z = [X_exog, Z_excl]."""
    Zp, dropped = d.pruned_instruments()
    if Zp.shape[1] != d.k1:
        raise EstimationError(
            f"fit_iv_gmm needs m == k1 (got m={Zp.shape[1]}, k1={d.k1}); "
            "use fit_liml for over-identified models")
    Z = np.column_stack([d.X_exog, Zp])
    X = _regressor_matrix(d)
    ZX = Z.T @ X
    r_scale = np.linalg.norm(ZX, axis=1)
    c_scale = np.linalg.norm(ZX, axis=0)
    r_scale[r_scale == 0] = 1.0
    c_scale[c_scale == 0] = 1.0
    try:
        beta = scipy.linalg.solve(ZX / r_scale[:, None] / c_scale[None, :],
                                  (Z.T @ d.y) / r_scale) / c_scale
    except scipy.linalg.LinAlgError as exc:
        raise EstimationError(f"singular Z'X: {exc}") from exc
    if not np.all(np.isfinite(beta)):
        raise EstimationError("singular Z'X")
    fit = _finish(d, "iv_gmm", beta, kappa=None, dropped=tuple(dropped))
    scale = np.linalg.norm(Z, axis=0) * np.linalg.norm(d.y)
    if (np.abs(Z.T @ fit.residuals) > 1e-8 * scale).any():
        raise EstimationError("IV moment conditions not satisfied; ill-conditioned design")
    return fit


def _liml_kappa(d: DesignMatrices, Zp: np.ndarray) -> float:
    """Smallest eigenvalue of (W'M_[Xexog,Z] W)^-1 (W'M_Xexog W), W = [y, X_endog]."""
    W = np.column_stack([d.y, d.X_endog])
    W = W / np.linalg.norm(W, axis=0)      # scaling leaves the pencil's eigenvalues unchanged
    Zfull = np.column_stack([d.X_exog, Zp])
    W_mz = W - Zfull @ solve_ls(Zfull, W)
    W_mx = W - d.X_exog @ solve_ls(d.X_exog, W)
    A = symmetrize(W.T @ W_mx)   # W' M_Xexog W
    B = symmetrize(W.T @ W_mz)   # W' M_Zfull W
    try:
        eigs = scipy.linalg.eigh(A, B, eigvals_only=True)
    except scipy.linalg.LinAlgError as exc:
        raise EstimationError(f"LIML eigenproblem failed: {exc}") from exc
    kappa = float(np.min(eigs))
    if kappa < 1.0 - 1e-6:
        raise EstimationError(f"LIML kappa={kappa:.6g} < 1: degenerate design")
    return kappa


def fit_liml(d: DesignMatrices) -> FitResult:
    """LIML (k-class) estimate for over-identified specifications."""
    Zp, dropped = d.pruned_instruments()
    if Zp.shape[1] < d.k1:
        raise EstimationError(
            f"under-identified: {Zp.shape[1]} instruments for {d.k1} endogenous")
    kappa = _liml_kappa(d, Zp)
    Zfull = np.column_stack([d.X_exog, Zp])
    X = _regressor_matrix(d)
    Xhat = Zfull @ solve_ls(Zfull, X)
    yhat = Zfull @ solve_ls(Zfull, d.y)
    # X'(I - kappa*M_Z)X = (1-kappa) X'X + kappa Xhat'Xhat
    A = (1.0 - kappa) * (X.T @ X) + kappa * (Xhat.T @ Xhat)
    b = (1.0 - kappa) * (X.T @ d.y) + kappa * (Xhat.T @ yhat)
    try:
        beta = _equilibrated_solve(A, b)
    except scipy.linalg.LinAlgError as exc:
        raise EstimationError(f"singular k-class system: {exc}") from exc
    if not np.all(np.isfinite(beta)):
        raise EstimationError("singular k-class system")
    return _finish(d, "liml", beta, kappa=kappa, dropped=tuple(dropped))


def small_sample_factor(n: int, k: int, n_clusters: int) -> float:
    """Finite-sample correction [G/(G-1)] * [(n-1)/(n-k)].

    Isolated here because the convention is not pinned down by any contract;
    change in one place if a different correction is wanted.
    """
    G = n_clusters
    return (G / (G - 1.0)) * ((n - 1.0) / (n - k))


def cluster_cov(fit: FitResult, d: DesignMatrices) -> FitResult:
    """Attach the cluster-robust sandwich covariance for `fit`.

    Scores use the instrument-projected (k-class for LIML) design; for OLS
    the regressors themselves. Clusters are the child ids.
    """
    if d.n_clusters < 2:
        raise EstimationError("cluster-robust covariance needs >= 2 clusters")
    X = _regressor_matrix(d)
    if fit.method == "ols":
        Xt = X
    else:
        Zp, _ = d.pruned_instruments()
        Zfull = np.column_stack([d.X_exog, Zp])
        Xhat = Zfull @ solve_ls(Zfull, X)
        kappa = 1.0 if fit.kappa is None else fit.kappa
        Xt = kappa * Xhat + (1.0 - kappa) * X
    A = symmetrize(Xt.T @ X)
    S = cluster_sums(Xt * fit.residuals[:, None], d.cluster_ids)
    c = small_sample_factor(d.n, d.k1 + d.k2, d.n_clusters)
    dscale = np.sqrt(np.abs(np.diag(A)))
    dscale[dscale == 0] = 1.0
    As = symmetrize(A / dscale[:, None] / dscale[None, :])
    Ainv = symmetrize(scipy.linalg.inv(As)) / dscale[:, None] / dscale[None, :]
    G = S @ Ainv            # vcov = c G'G, a Gram matrix, so PSD by form
    vcov = symmetrize(c * (G.T @ G))
    if not np.all(np.isfinite(vcov)):
        raise EstimationError("cluster covariance overflow: degenerate design")
    eigs = np.linalg.eigvalsh(vcov)
    if eigs.min() < -1e-10 * max(np.trace(vcov), 1e-300):
        raise EstimationError("cluster covariance not PSD")
    return dataclasses.replace(fit, vcov=vcov)
