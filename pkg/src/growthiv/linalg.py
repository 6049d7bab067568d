"""Shared dense linear-algebra helpers for the estimators and diagnostics."""

from __future__ import annotations

import numpy as np
import scipy.linalg


def solve_ls(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Least-squares solve via QR; `b` may be a vector or matrix."""
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    return coef


def partial_out(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Residual of each column of B after projecting on the column space of A.

    Equivalent to M_A @ B without forming the n x n annihilator.
    """
    if A.size == 0:
        return B.copy()
    return B - A @ solve_ls(A, B)


def project_on(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """P_A @ B, the projection of B onto the column space of A."""
    if A.size == 0:
        return np.zeros_like(B)
    return A @ solve_ls(A, B)


def sequential_rank_keep(X: np.ndarray, *, base: np.ndarray | None = None,
                         tol_scale: float | None = None) -> list[int]:
    """Indices of columns of X that add rank, scanned left to right.

    A column is kept if its residual, after projecting on `base` and the
    previously kept columns, has norm above tol. Keeps the earliest of any
    collinear group, so appended duplicates are the ones dropped.
    """
    n = X.shape[0]
    if tol_scale is None:
        tol_scale = np.linalg.norm(X) if X.size else 1.0
    tol = 1e-10 * max(tol_scale, 1.0)
    kept: list[int] = []
    Q_cols: list[np.ndarray] = []
    if base is not None and base.size:
        Qb, _ = np.linalg.qr(base)
        Q_cols = [Qb[:, j] for j in range(Qb.shape[1])]
    for j in range(X.shape[1]):
        v = X[:, j].astype(float).copy()
        for q in Q_cols:
            v -= q * (q @ v)
        # second orthogonalization pass for numerical safety
        for q in Q_cols:
            v -= q * (q @ v)
        nv = np.linalg.norm(v)
        if nv > tol:
            kept.append(j)
            Q_cols.append(v / nv)
    return kept


def cluster_sums(scores: np.ndarray, cluster_codes: np.ndarray) -> np.ndarray:
    """Sum score rows within clusters; returns one row per cluster.

    `cluster_codes` are arbitrary integer labels; output order follows the
    sorted unique labels, which is irrelevant for the outer products built
    from these sums.
    """
    order = np.argsort(cluster_codes, kind="stable")
    sorted_codes = cluster_codes[order]
    boundaries = np.flatnonzero(np.r_[True, sorted_codes[1:] != sorted_codes[:-1]])
    return np.add.reduceat(scores[order], boundaries, axis=0)


def sym_inv_sqrt(M: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root with small-eigenvalue clipping."""
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    floor = max(w.max(), 0.0) * 1e-14 + 1e-300
    w = np.maximum(w, floor)
    return (V / np.sqrt(w)) @ V.T


def psd_quadform(v: np.ndarray, M: np.ndarray) -> tuple[float, bool]:
    """v' M^+ v for symmetric M; second value flags pseudo-inverse use."""
    M = 0.5 * (M + M.T)
    try:
        L = scipy.linalg.cholesky(M, lower=True)
        x = scipy.linalg.solve_triangular(L, v, lower=True)
        return float(x @ x), False
    except scipy.linalg.LinAlgError:
        return float(v @ scipy.linalg.pinvh(M) @ v), True


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)
