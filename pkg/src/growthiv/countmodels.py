"""Maximum-likelihood count regression for diarrhea-day extrapolation.

Families: Poisson, negative binomial (NB2), zero-inflated Poisson, and
zero-inflated negative binomial, all with a log link for the mean and an
intercept-only logistic zero-inflation component. Fitting is damped Newton
with analytic gradients; convergence requires a gradient sup-norm below 1e-8.

The Poisson pmf is the standard exp(-mu) mu^y / y! density (the source
write-up prints exp(mu), which does not integrate to one).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.special

MAX_ITER = 100
GRAD_TOL = 1e-8
PARAM_BOUND = 50.0

FAMILIES = ("poisson", "negbin", "zip", "zinb")

BATTERY_COVARIATES = tuple(f"diar_{m}mo" for m in range(2, 25, 2)) + (
    "village_avg", "female", "first_born", "second_born", "third_born",
    "const")

WINDOW_LABELS = tuple(f"{m}-{m + 2}" for m in range(0, 24, 2))


class CountModelError(ValueError):
    pass


@dataclass(frozen=True)
class CountDataset:
    """Counts for one age window plus the covariate matrix."""

    y: np.ndarray
    X: np.ndarray
    names: tuple[str, ...]
    window_label: str = ""

    def __post_init__(self):
        y = np.asarray(self.y)
        if not np.issubdtype(y.dtype, np.integer):
            if not np.allclose(y, np.round(y)):
                raise CountModelError("counts must be integers")
            y = np.round(y).astype(np.int64)
        if (y < 0).any():
            raise CountModelError("counts must be non-negative")
        object.__setattr__(self, "y", y)
        X = np.asarray(self.X, dtype=float)
        if not np.all(np.isfinite(X)):
            raise CountModelError("non-finite covariates")
        object.__setattr__(self, "X", X)
        if len(self.names) != X.shape[1]:
            raise CountModelError("covariate names length mismatch")


def log_poisson_pmf(y, mu):
    """log of exp(-mu) mu^y / y!"""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(y > 0, y * np.log(mu), 0.0)
    return t - mu - scipy.special.gammaln(y + 1.0)


def poisson_pmf(y, mu):
    return np.exp(log_poisson_pmf(y, mu))


def _eta(X, beta):
    return np.clip(X @ beta, -30.0, 30.0)


def _nb_loglik_terms(y, mu, r):
    return (scipy.special.gammaln(y + r) - scipy.special.gammaln(r)
            - scipy.special.gammaln(y + 1.0) + r * np.log(r)
            - (r + y) * np.log(r + mu) + np.where(y > 0, y * np.log(mu), 0.0))


class _Family:
    """Log-likelihood, analytic gradient, and mean prediction per family."""

    def __init__(self, name: str, k_beta: int):
        if name not in FAMILIES:
            raise CountModelError(f"unknown family {name!r}")
        self.name = name
        self.k_beta = k_beta
        self.has_alpha = name in ("negbin", "zinb")
        self.has_inflation = name in ("zip", "zinb")
        self.k = k_beta + self.has_alpha + self.has_inflation

    def unpack(self, theta):
        beta = theta[:self.k_beta]
        pos = self.k_beta
        # clamp the dispersion log so exploratory line-search steps cannot
        # overflow exp(); the optimizer bounds parameters at +-50 anyway
        s = float(np.clip(theta[pos], -40.0, 40.0)) if self.has_alpha else None
        pos += self.has_alpha
        c = theta[pos] if self.has_inflation else None
        return beta, s, c

    def loglik(self, theta, y, X) -> float:
        beta, s, c = self.unpack(theta)
        mu = np.exp(_eta(X, beta))
        if self.name == "poisson":
            return float(np.sum(log_poisson_pmf(y, mu)))
        if self.name == "negbin":
            return float(np.sum(_nb_loglik_terms(y, mu, math.exp(-s))))
        pi = scipy.special.expit(c)
        log_pi = -np.logaddexp(0.0, -c)          # log expit(c)
        log_1mpi = -np.logaddexp(0.0, c)
        zero = y == 0
        if self.name == "zip":
            base = log_poisson_pmf(y, mu)
            log_q0 = -mu
        else:
            r = math.exp(-s)
            base = _nb_loglik_terms(y, mu, r)
            log_q0 = r * (np.log(r) - np.log(r + mu))
        ll = np.where(zero,
                      np.logaddexp(log_pi, log_1mpi + log_q0),
                      log_1mpi + base)
        del pi
        return float(np.sum(ll))

    def grad(self, theta, y, X) -> np.ndarray:
        beta, s, c = self.unpack(theta)
        mu = np.exp(_eta(X, beta))
        g = np.zeros_like(theta)
        if self.name == "poisson":
            g[:self.k_beta] = X.T @ (y - mu)
            return g
        if self.name == "negbin":
            r = math.exp(-s)
            g[:self.k_beta] = X.T @ (r * (y - mu) / (r + mu))
            dll_dr = (scipy.special.digamma(y + r) - scipy.special.digamma(r)
                      + np.log(r) + 1.0 - np.log(r + mu) - (r + y) / (r + mu))
            g[self.k_beta] = float(np.sum(dll_dr) * (-r))
            return g
        pi = float(scipy.special.expit(c))
        zero = y == 0
        if self.name == "zip":
            q0 = np.exp(-mu)
            denom = pi + (1 - pi) * q0
            w_beta = np.where(zero, -(1 - pi) * q0 * mu / denom, y - mu)
            g[:self.k_beta] = X.T @ w_beta
            g[-1] = float(np.sum(np.where(zero,
                                          pi * (1 - pi) * (1 - q0) / denom,
                                          -pi)))
            return g
        r = math.exp(-s)
        log_q0 = r * (np.log(r) - np.log(r + mu))
        q0 = np.exp(log_q0)
        denom = pi + (1 - pi) * q0
        nb_beta = r * (y - mu) / (r + mu)
        w_beta = np.where(zero, (1 - pi) * q0 * (-r / (r + mu)) * mu / denom,
                          nb_beta)
        g[:self.k_beta] = X.T @ w_beta
        dlnq0_dr = np.log(r) - np.log(r + mu) + mu / (r + mu)
        dll_dr_pos = (scipy.special.digamma(y + r) - scipy.special.digamma(r)
                      + np.log(r) + 1.0 - np.log(r + mu) - (r + y) / (r + mu))
        dll_dr = np.where(zero, (1 - pi) * q0 * dlnq0_dr / denom, dll_dr_pos)
        g[self.k_beta] = float(np.sum(dll_dr) * (-r))
        g[-1] = float(np.sum(np.where(zero,
                                      pi * (1 - pi) * (1 - q0) / denom,
                                      -pi)))
        return g

    def mean(self, theta, X) -> np.ndarray:
        beta, _s, c = self.unpack(theta)
        mu = np.exp(_eta(X, beta))
        if self.has_inflation:
            mu = mu * (1.0 - scipy.special.expit(c))
        return mu

    def start(self, y, X) -> np.ndarray:
        theta = np.zeros(self.k)
        ybar = max(float(y.mean()), 1e-3)
        const = np.flatnonzero((X == 1.0).all(axis=0))
        anchor = const[0] if const.size else 0
        theta[anchor] = math.log(ybar)
        if self.has_alpha:
            var = float(y.var())
            alpha0 = max((var - ybar) / ybar ** 2, 0.05)
            theta[self.k_beta] = math.log(alpha0)
        if self.has_inflation:
            p0 = float((y == 0).mean())
            excess = p0 - math.exp(-ybar)
            theta[-1] = scipy.special.logit(min(max(excess, 0.02), 0.90))
        return theta


def _fd_hessian(fam, theta, y, X):
    k = theta.shape[0]
    H = np.zeros((k, k))
    for j in range(k):
        h = 1e-6 * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        H[:, j] = (fam.grad(tp, y, X) - fam.grad(tm, y, X)) / (2 * h)
    return 0.5 * (H + H.T)


@dataclass(frozen=True)
class CountFit:
    family: str
    names: tuple[str, ...]
    beta: np.ndarray
    loglik: float
    bic: float
    n: int
    k: int
    converged: bool
    grad_norm: float
    alpha: float | None = None
    inflation_pi: float | None = None
    degenerate: bool = False
    r2_pred: float | None = None
    se: np.ndarray | None = None       # observed-information diagonal
    coef: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.coef:
            object.__setattr__(
                self, "coef",
                {n: float(b) for n, b in zip(self.names, self.beta)})

    def theta(self) -> np.ndarray:
        parts = [self.beta]
        if self.alpha is not None:
            parts.append([math.log(self.alpha)])
        if self.inflation_pi is not None:
            parts.append([scipy.special.logit(self.inflation_pi)])
        return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float))
                               for p in parts])

    def predict_mean(self, X: np.ndarray) -> np.ndarray:
        return _Family(self.family, len(self.names)).mean(
            self.theta(), np.atleast_2d(X))


def fit_count(data: CountDataset, family: str) -> CountFit:
    """Newton-type MLE for one family on one window dataset."""
    y, X = data.y, data.X
    n, k_beta = X.shape
    fam = _Family(family, k_beta)
    if n <= fam.k:
        raise CountModelError(f"n={n} too small for k={fam.k}")
    if int(y.sum()) == 0:
        # all-zero counts push the intercept to -inf; guard and flag
        beta = np.zeros(k_beta)
        const = np.flatnonzero((X == 1.0).all(axis=0))
        beta[const[0] if const.size else 0] = math.log(0.5 / n)
        ll = float(np.sum(log_poisson_pmf(y, np.exp(_eta(X, beta)))))
        return CountFit(family="poisson", names=data.names, beta=beta,
                        loglik=ll, bic=-2 * ll + k_beta * math.log(n), n=n,
                        k=k_beta, converged=False, grad_norm=float("nan"),
                        degenerate=True)

    theta = fam.start(y, X)
    ll = fam.loglik(theta, y, X)
    converged = False
    for _ in range(MAX_ITER):
        g = fam.grad(theta, y, X)
        gnorm = float(np.abs(g).max())
        if gnorm < GRAD_TOL:
            converged = True
            break
        H = _fd_hessian(fam, theta, y, X)
        direction = None
        try:
            direction = -np.linalg.solve(H, g)    # Newton ascent step
            if (g @ direction) <= 0:              # H not negative definite
                direction = None
        except np.linalg.LinAlgError:
            direction = None
        if direction is None:
            ridge = np.abs(np.diag(H)).max() + 1.0
            direction = np.linalg.solve(ridge * np.eye(fam.k) - H, g)
        t = 1.0
        improved = False
        for _ls in range(40):
            cand = theta + t * direction
            ll_new = fam.loglik(cand, y, X)
            if np.isfinite(ll_new) and ll_new > ll - 1e-12:
                theta, ll = cand, ll_new
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        if np.abs(theta).max() > PARAM_BOUND:
            raise CountModelError(
                f"separation detected: parameter exceeded {PARAM_BOUND}")
    gnorm = float(np.abs(fam.grad(theta, y, X)).max())
    converged = converged or gnorm < GRAD_TOL
    beta, s, c = fam.unpack(theta)
    bic = -2.0 * ll + fam.k * math.log(n)
    H = _fd_hessian(fam, theta, y, X)
    try:
        info_inv = np.linalg.inv(-H)
        se_all = np.sqrt(np.maximum(np.diag(info_inv), 0.0))
    except np.linalg.LinAlgError:
        se_all = np.full(fam.k, np.nan)
    return CountFit(family=family, names=data.names, beta=beta.copy(),
                    loglik=ll, bic=bic, n=n, k=fam.k, converged=converged,
                    grad_norm=gnorm, se=se_all[:fam.k_beta],
                    alpha=math.exp(s) if s is not None else None,
                    inflation_pi=(float(scipy.special.expit(c))
                                  if c is not None else None))


def r2_pred(fit: CountFit, data: CountDataset) -> float:
    """Squared Pearson correlation between predicted means and counts."""
    pred = fit.predict_mean(data.X)
    y = data.y.astype(float)
    if pred.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.corrcoef(pred, y)[0, 1] ** 2)


def select_model(fits: list[CountFit], holdout: CountDataset | None = None,
                 insample: CountDataset | None = None
                 ) -> tuple[CountFit, CountFit]:
    """(best_by_bic, best_by_r2); ties broken by family enum order."""
    usable = [f for f in fits if f.converged]
    if len(usable) < 2:
        raise CountModelError("need at least two converged fits to select")
    order = {name: i for i, name in enumerate(FAMILIES)}
    best_bic = min(usable, key=lambda f: (f.bic, order[f.family]))
    eval_data = holdout if holdout is not None else insample
    if eval_data is None:
        raise CountModelError("select_model needs holdout or insample data")
    scored = [(r2_pred(f, eval_data), f) for f in usable]
    best_r2 = max(scored, key=lambda t: (t[0], -order[t[1].family]))[1]
    return best_bic, best_r2


def predict_days(fit: CountFit, covariates: dict[str, float] | np.ndarray,
                 clamp_max: float) -> float:
    """Expected days in the window, clamped to [0, clamp_max]."""
    if isinstance(covariates, dict):
        missing = [n for n in fit.names if n not in covariates]
        if missing:
            raise CountModelError(f"missing covariates {missing}")
        x = np.array([covariates[n] for n in fit.names], dtype=float)
    else:
        x = np.asarray(covariates, dtype=float)
        if x.shape[-1] != len(fit.names):
            raise CountModelError("covariate vector length mismatch")
    mu = float(fit.predict_mean(x.reshape(1, -1))[0])
    return min(max(mu, 0.0), float(clamp_max))


# ---------------------------------------------------------------------------
# The 12-window battery


@dataclass
class WindowFit:
    label: str
    fit: CountFit | None
    flagged: bool = False
    reason: str = ""

    def predict(self, x: np.ndarray, clamp_max: float) -> float:
        if self.fit is None:
            return float("nan")
        return predict_days(self.fit, x, clamp_max)


class Battery:
    """Per-window selected count fits, serializable and reloadable bit-exactly."""

    def __init__(self, windows: list[WindowFit], scale_factor: float = 1.0):
        self.windows = {w.label: w for w in windows}
        self.scale_factor = scale_factor

    def window_for_end_age(self, end_age_months: int) -> WindowFit | None:
        label = f"{end_age_months - 2}-{end_age_months}"
        w = self.windows.get(label)
        if w is None or w.fit is None:
            return None
        return w

    def covariate_row(self, measures12: np.ndarray, village_avg: float,
                      female: float, birth_order: int) -> np.ndarray:
        """Battery covariates in canonical order; applies the cross-sample
        scale factor to the window measures."""
        m = np.asarray(measures12, dtype=float) * self.scale_factor
        return np.concatenate([
            m, [village_avg, female,
                float(birth_order == 1), float(birth_order == 2),
                float(birth_order == 3), 1.0]])

    def to_json(self) -> str:
        payload = {"scale_factor": self.scale_factor, "windows": []}
        for label in sorted(self.windows):
            w = self.windows[label]
            entry = {"label": label, "flagged": w.flagged, "reason": w.reason}
            if w.fit is not None:
                f = w.fit
                entry["fit"] = {
                    "family": f.family, "names": list(f.names),
                    "beta": [float(b) for b in f.beta],
                    "loglik": f.loglik, "bic": f.bic, "n": f.n, "k": f.k,
                    "converged": f.converged, "grad_norm": f.grad_norm,
                    "alpha": f.alpha, "inflation_pi": f.inflation_pi,
                    "degenerate": f.degenerate}
            payload["windows"].append(entry)
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Battery":
        payload = json.loads(text)
        windows = []
        for entry in payload["windows"]:
            fit = None
            if "fit" in entry:
                f = entry["fit"]
                fit = CountFit(
                    family=f["family"], names=tuple(f["names"]),
                    beta=np.array(f["beta"], dtype=float),
                    loglik=f["loglik"], bic=f["bic"], n=f["n"], k=f["k"],
                    converged=f["converged"], grad_norm=f["grad_norm"],
                    alpha=f["alpha"], inflation_pi=f["inflation_pi"],
                    degenerate=f["degenerate"])
            windows.append(WindowFit(label=entry["label"], fit=fit,
                                     flagged=entry["flagged"],
                                     reason=entry["reason"]))
        return cls(windows, scale_factor=payload["scale_factor"])


def fit_window_battery(windows: list[CountDataset], selector: str = "r2",
                       scale_factor: float = 1.0) -> Battery:
    """Fit all four families per window and keep the selected one.

    selector: 'bic' or 'r2' (in-sample). Windows that cannot be fit are
    flagged and skipped; the others proceed.
    """
    if selector not in ("bic", "r2"):
        raise CountModelError(f"unknown selector {selector!r}")
    out = []
    for data in windows:
        fits, errors = [], []
        for family in FAMILIES:
            try:
                fits.append(fit_count(data, family))
            except CountModelError as exc:
                errors.append(f"{family}: {exc}")
        degenerate = [f for f in fits if f.degenerate]
        if degenerate:
            out.append(WindowFit(label=data.window_label, fit=degenerate[0],
                                 flagged=True, reason="all-zero counts"))
            continue
        try:
            best_bic, best_r2 = select_model(fits, insample=data)
        except CountModelError as exc:
            out.append(WindowFit(label=data.window_label, fit=None,
                                 flagged=True,
                                 reason="; ".join([str(exc)] + errors)))
            continue
        out.append(WindowFit(label=data.window_label,
                             fit=best_bic if selector == "bic" else best_r2))
    return Battery(out, scale_factor=scale_factor)
