"""Synthetic panels from the structural growth model.

Height and weight accumulate geometrically-decaying effects of protein and
non-protein period intakes on top of a child endowment and age profile;
intakes respond to prices (the instruments), the endowment, and lagged height
shocks (the endogeneity dial), and are reported with measurement error. The
derived growth equations then hold exactly with known coefficients, which
makes generated panels a ground-truth oracle for the estimators and
diagnostics.

Age profiles are quadratic in age and the default visit schedule is regular,
so the profiles are absorbed exactly by the age, age-squared, and intercept
controls of the estimating equations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.special

from .ingest import (DAYS_PER_MONTH, GUATEMALA_PRICE_ITEMS,
                     PHILIPPINES_PRICE_ITEMS, PanelTable, PriceSeries,
                     PriceTable, month_index)

ATOLE_NONPROT_PER_PROT = 2.5   # kcal ratio of the supplement, roughly 117/46


@dataclass(frozen=True)
class PriceProcess:
    """AR(1) for one instrument price: p_t = mean + rho (p_{t-1}-mean) + e."""

    item: str
    mean: float
    rho: float
    sd: float


def _default_prices(country: str) -> tuple[PriceProcess, ...]:
    items = GUATEMALA_PRICE_ITEMS if country == "guatemala" \
        else PHILIPPINES_PRICE_ITEMS
    return tuple(PriceProcess(item=it, mean=10.0 + 2.0 * i, rho=0.6,
                              sd=1.5 + 0.2 * i)
                 for i, it in enumerate(items))


def _default_loadings(country: str) -> dict[str, tuple[float, float]]:
    """Price -> (protein, nonprotein) daily-kcal responses.

    Protein-rich foods move protein intake; staples move the rest. The
    near-orthogonal pattern is what lets the two intakes be separately
    identified, mirroring the role of the supplement and staple prices.
    """
    if country == "guatemala":
        return {"eggs": (-3.0, -0.4), "chicken": (-2.5, -0.3),
                "pork": (-2.0, -0.3), "beef": (-1.5, -0.2),
                "beans": (-1.0, -4.0), "corn": (-0.2, -6.0),
                "rice": (-0.2, -5.0)}
    return {"dried_fish": (-3.0, -0.4), "eggs": (-2.5, -0.4),
            "corn": (-0.2, -6.0), "tomatoes": (-0.4, -3.0)}


@dataclass(frozen=True)
class StructuralParams:
    """Ground truth for the generator; see implied_growth_coefficients."""

    country: str = "guatemala"
    n_children: int = 1000
    n_communities: int = 20
    seed_default: int = 0

    alpha: float = 0.004
    sigma: float = 1.0            # derived from delta0/beta0 when strict
    gamma: float = 0.9
    beta0_prot: float = 1.1e-4    # cm per period kcal of protein
    beta0_nonprot: float = 8.0e-6
    delta0_prot: float = 0.055    # g per period kcal (strict Assumption 2)
    delta0_nonprot: float = 4.0e-3
    strict_assumption2: bool = True

    # mu enters height as alpha*mu and weight as sigma*mu; with the default
    # alpha/sigma this gives ~1.5 cm and ~375 g endowment spreads, a second
    # cross-child factor besides the input history (needed so lagged height
    # and weight are separately identified by their second lags)
    mu_sd: float = 375.0
    eps_h_sd: float = 0.45
    eps_w_sd: float = 140.0

    a0: tuple[float, float] = (55.0, 340.0)
    a_mu: tuple[float, float] = (0.008, 0.03)
    a_comp: tuple[float, float] = (-4.0, -12.0)
    input_noise_sd: tuple[float, float] = (6.0, 30.0)
    meas_err_sd: tuple[float, float] = (16.0, 70.0)

    prices: tuple[PriceProcess, ...] = ()
    price_loadings: dict = field(default_factory=dict)

    atole_suppl_kcal_day: float = 18.0
    atole_dist_slope: float = -2.5

    birth_years: tuple[int, ...] = ()
    miss_intake_prob: float = 0.0
    price_missing_prob: float = 0.0
    visit_jitter_days: int = 6    # gap variation; 0 makes gap_msmt collinear
    diar_logit_mean: float = -2.0
    diar_logit_sd: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.n_children < 2:
            raise ValueError("need at least 2 children")
        if not self.prices:
            object.__setattr__(self, "prices", _default_prices(self.country))
        if not self.price_loadings:
            object.__setattr__(self, "price_loadings",
                               _default_loadings(self.country))
        if self.strict_assumption2:
            ratio = self.delta0_prot / self.beta0_prot
            object.__setattr__(self, "sigma", ratio * self.alpha - 1.0)
            object.__setattr__(self, "delta0_nonprot",
                               ratio * self.beta0_nonprot)
        if not self.birth_years:
            years = (1969, 1970, 1971, 1972) if self.country == "guatemala" \
                else (1983, 1984)
            object.__setattr__(self, "birth_years", years)

    # visit schedule ----------------------------------------------------
    @property
    def period_days(self) -> int:
        return 91 if self.country == "guatemala" else 61

    @property
    def start_age_days(self) -> int:
        return 91 if self.country == "guatemala" else 122

    @property
    def n_measurements(self) -> int:
        return 8 if self.country == "guatemala" else 11

    def ages(self) -> np.ndarray:
        return self.start_age_days + self.period_days * np.arange(
            self.n_measurements)


def implied_growth_coefficients(params: StructuralParams) -> dict[str, dict[str, float]]:
    """Coefficients of the derived growth equations.

    Height equation: current inputs enter with their beta0, lagged weight
    with alpha*(gamma-1), lagged height with -sigma*(gamma-1). Weight
    equation: delta0 on inputs, (gamma-1)*(1+sigma) on lagged weight, and
    -sigma*(gamma-1)*(1+sigma)/alpha on lagged height.
    """
    a, s, g = params.alpha, params.sigma, params.gamma
    return {
        "height": {"protein": params.beta0_prot,
                   "nonprotein": params.beta0_nonprot,
                   "lag_weight": a * (g - 1.0),
                   "lag_height": -s * (g - 1.0)},
        "weight": {"protein": params.delta0_prot,
                   "nonprotein": params.delta0_nonprot,
                   "lag_weight": (g - 1.0) * (1.0 + s),
                   "lag_height": -s * (g - 1.0) * (1.0 + s) / a},
    }


def input_lag_weights(params: StructuralParams, horizon: int
                      ) -> dict[str, dict[str, np.ndarray]]:
    """Effect of an input j periods back: gamma^j times the current effect."""
    decay = params.gamma ** np.arange(horizon)
    return {
        "height": {"protein": params.beta0_prot * decay,
                   "nonprotein": params.beta0_nonprot * decay},
        "weight": {"protein": params.delta0_prot * decay,
                   "nonprotein": params.delta0_nonprot * decay},
    }


def no_endogeneity_params(country: str = "guatemala",
                          **overrides) -> StructuralParams:
    """Configuration under which feasible OLS is (near-)unbiased for beta0.

    Besides shutting the behavioral channels (a_mu, a_comp) and measurement
    error, prices are made serially independent, the supplement is removed,
    and the anthropometric shocks are shrunk: the lagged height and weight
    regressors are endogenous by construction, and any serial dependence in
    intakes would transmit their bias into the input coefficients.
    """
    kw = dict(
        country=country,
        a_mu=(0.0, 0.0), a_comp=(0.0, 0.0), meas_err_sd=(0.0, 0.0),
        eps_h_sd=0.06, eps_w_sd=18.0,
        atole_suppl_kcal_day=0.0,
        prices=tuple(PriceProcess(p.item, p.mean, 0.0, p.sd)
                     for p in _default_prices(country)))
    kw.update(overrides)
    return StructuralParams(**kw)


def _base_profiles(age_days: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linear age profiles.

    Linear (not quadratic) so that the differenced equation's deterministic
    part is spanned exactly by the intercept, age, and gap controls even
    when visit timing is jittered; curvature would leave age-by-gap terms
    outside the control set and leak into the intake coefficients.
    """
    a = age_days.astype(float)
    height = 52.0 + 0.038 * a
    weight = 4000.0 + 7.5 * a
    return height, weight


@dataclass
class SyntheticPanel:
    """Observed panel plus the hidden truth record."""

    panel: PanelTable
    prices: PriceTable
    deflator: dict[int, float]
    truth: dict
    params: StructuralParams


def generate_panel(params: StructuralParams, seed: int) -> SyntheticPanel:
    """Simulate the structural model; byte-identical for identical seeds."""
    rng = np.random.default_rng(seed)
    n = params.n_children
    K = params.n_measurements
    country = params.country

    community = np.arange(n) % params.n_communities
    atole = ((community % 2 == 0) & (country == "guatemala"))
    distance = np.abs(rng.normal(3.0, 1.5, size=n))
    distance_missing = rng.random(n) < (0.05 if country == "guatemala" else 0.0)
    female = rng.random(n) < 0.5
    birth_order = 1 + rng.integers(0, 4, size=n)
    birth_year = np.array([params.birth_years[i % len(params.birth_years)]
                           for i in range(n)])

    # visit schedule with day-level jitter, as in the real surveys
    j = params.visit_jitter_days
    ages = params.ages()[None, :] + (
        rng.integers(-j, j + 1, size=(n, K)) if j > 0
        else np.zeros((n, K), dtype=np.int64))
    gaps = np.diff(ages, axis=1).astype(float)

    # calendar months of each measurement
    months = (birth_year[:, None] - 1900) * 12 \
        + np.rint(ages / DAYS_PER_MONTH).astype(np.int64)

    # price paths per item: community-level monthly AR(1), or national
    # annual (stored on December) for guatemala
    lo, hi = int(months.min()) - 30, int(months.max()) + 3
    price_rows: list[PriceSeries] = []
    price_at: dict[str, np.ndarray] = {}
    if country == "guatemala":
        years = np.arange(1900 + lo // 12 - 1, 1900 + hi // 12 + 1)
        for proc in params.prices:
            path = np.empty(len(years))
            stat_sd = proc.sd / math.sqrt(max(1 - proc.rho ** 2, 1e-6))
            path[0] = proc.mean + rng.normal(0.0, stat_sd)
            for t in range(1, len(years)):
                path[t] = proc.mean + proc.rho * (path[t - 1] - proc.mean) \
                    + rng.normal(0.0, proc.sd)
            path = np.maximum(path, 0.05 * proc.mean)
            price_rows.extend(
                PriceSeries(proc.item, "national", month_index(int(y), 12),
                            float(p))
                for y, p in zip(years, path))
            # child x measurement price actually faced: lagged annual value
            year_of = 1900 + months // 12
            lookup = {int(y): float(p) for y, p in zip(years, path)}
            price_at[proc.item] = np.vectorize(
                lambda y: lookup[int(y) - 1])(year_of)
    else:
        n_comm = params.n_communities
        month_range = np.arange(lo, hi + 1)
        for proc in params.prices:
            stat_sd = proc.sd / math.sqrt(max(1 - proc.rho ** 2, 1e-6))
            path = np.empty((n_comm, len(month_range)))
            path[:, 0] = proc.mean + rng.normal(0.0, stat_sd, size=n_comm)
            for t in range(1, len(month_range)):
                path[:, t] = proc.mean + proc.rho * (path[:, t - 1] - proc.mean) \
                    + rng.normal(0.0, proc.sd, size=n_comm)
            path = np.maximum(path, 0.05 * proc.mean)
            # households face the full path; the survey may miss some points
            keep = rng.random(path.shape) >= params.price_missing_prob
            for c in range(n_comm):
                price_rows.extend(
                    PriceSeries(proc.item, str(c), int(month_range[t]),
                                float(path[c, t]))
                    for t in range(len(month_range)) if keep[c, t])
            col = months - lo
            price_at[proc.item] = path[community[:, None], col]

    deflator = {y: 1.0 for y in range(1900 + lo // 12 - 2, 1900 + hi // 12 + 2)}

    # structural shocks and endowment
    mu = rng.normal(0.0, params.mu_sd, size=n)
    eps_h = rng.normal(0.0, params.eps_h_sd, size=(n, K))
    eps_w = rng.normal(0.0, params.eps_w_sd, size=(n, K))

    # daily intake rates at each measurement; prices enter centered so that
    # a0 is the mean intake and the non-negativity clip rarely binds
    loadings = params.price_loadings
    r_true = np.zeros((2, n, K))
    for j, (a0, a_mu, a_comp, nsd) in enumerate(
            zip(params.a0, params.a_mu, params.a_comp, params.input_noise_sd)):
        base = a0 + a_mu * mu[:, None] + rng.normal(0.0, nsd, size=(n, K))
        for proc in params.prices:
            lj = loadings.get(proc.item, (0.0, 0.0))[j]
            base += lj * (price_at[proc.item] - proc.mean)
        comp = np.zeros((n, K))
        comp[:, 1:] = a_comp * eps_h[:, :-1]
        r_true[j] = np.maximum(base + comp, 0.0)
    r_obs = r_true + rng.normal(
        0.0, np.asarray(params.meas_err_sd)[:, None, None], size=(2, n, K))
    r_obs = np.maximum(r_obs, 0.0)

    # supplement (guatemala): measured exactly, per period, at the end row
    suppl_prot = np.zeros((n, K))
    if country == "guatemala":
        daily = np.where(atole,
                         np.maximum(params.atole_suppl_kcal_day
                                    + params.atole_dist_slope * distance, 0.0),
                         0.0)
        suppl_prot[:, 1:] = daily[:, None] * gaps
    suppl_nonprot = ATOLE_NONPROT_PER_PROT * suppl_prot

    # true period intakes and anthropometrics per the structural equations
    x_true = np.zeros((2, n, K))       # index k holds intake over (k-1, k]
    for j in range(2):
        x_true[j, :, 1:] = 0.5 * (r_true[j, :, :-1] + r_true[j, :, 1:]) * gaps
    x_true[0] += suppl_prot
    x_true[1] += suppl_nonprot

    base_h, base_w = _base_profiles(ages)
    S_h = np.zeros(n)
    S_w = np.zeros(n)
    height = np.zeros((n, K))
    weight = np.zeros((n, K))
    for k in range(K):
        if k > 0:
            inputs_h = params.beta0_prot * x_true[0, :, k] \
                + params.beta0_nonprot * x_true[1, :, k]
            inputs_w = params.delta0_prot * x_true[0, :, k] \
                + params.delta0_nonprot * x_true[1, :, k]
            S_h = params.gamma * S_h + inputs_h
            S_w = params.gamma * S_w + inputs_w
        height[:, k] = base_h[:, k] + params.alpha * mu + S_h + eps_h[:, k]
        weight[:, k] = base_w[:, k] + params.sigma * mu + S_w + eps_w[:, k]

    # morbidity and breastfeeding (no structural effect; controls only)
    q = scipy.special.expit(rng.normal(params.diar_logit_mean,
                                       params.diar_logit_sd, size=n))
    window = 15 if country == "guatemala" else 7
    diar = rng.binomial(window, q[:, None], size=(n, K)).astype(float)
    wean_age = rng.normal(14 * DAYS_PER_MONTH, 4 * DAYS_PER_MONTH, size=n)
    bf = ages < wean_age[:, None]

    miss = rng.random((n, K)) < params.miss_intake_prob

    # assemble the observed panel
    child_ids = np.repeat([f"c{i:05d}" for i in range(n)], K)
    comm_ids = np.repeat(community.astype(str), K)
    prot_daily = r_obs[0].ravel().copy()
    nonprot_daily = r_obs[1].ravel().copy()
    prot_daily[miss.ravel()] = np.nan
    nonprot_daily[miss.ravel()] = np.nan
    panel = PanelTable(
        country,
        child_ids, comm_ids,
        age_days=ages.ravel(),
        height_cm=height.ravel(),
        weight_g=weight.ravel(),
        protein_kcal_day=prot_daily,
        nonprotein_kcal_day=nonprot_daily,
        suppl_protein_kcal=suppl_prot.ravel(),
        suppl_nonprotein_kcal=suppl_nonprot.ravel(),
        diar_days=diar.ravel(),
        diar_window_days=np.full(n * K, window),
        birth_order=np.repeat(birth_order, K),
        birth_year=np.repeat(birth_year, K),
        distance_km=np.repeat(np.where(distance_missing, np.nan, distance), K),
        breastfed=bf.ravel(),
        female=np.repeat(female, K),
        atole=np.repeat(atole, K),
    )
    truth = {"mu": mu, "eps_h": eps_h, "eps_w": eps_w, "r_true": r_true,
             "x_true": x_true, "ages": ages,
             "coefficients": implied_growth_coefficients(params)}
    if not np.isfinite(height).all() or not np.isfinite(weight).all():
        raise ValueError("non-finite trajectory: check gamma/alpha/sigma scales")
    return SyntheticPanel(panel=panel, prices=PriceTable(price_rows),
                          deflator=deflator, truth=truth, params=params)


# ---------------------------------------------------------------------------
# Guatemala-shaped diarrhea windows for the count-model battery


def make_diarrhea_windows(seed: int, n_per_window: int = 250,
                          n_villages: int = 8):
    """Two-month diarrhea counts with the battery covariate layout.

    The response loads on the window's own 15-day measure, its neighbors,
    the village-age average, and the demographics, mimicking the structure
    the battery is fit on.
    """
    from .countmodels import BATTERY_COVARIATES, CountDataset, WINDOW_LABELS
    rng = np.random.default_rng(seed)
    datasets = []
    for w, label in enumerate(WINDOW_LABELS):
        n = n_per_window
        propensity = rng.normal(-1.8, 0.7, size=n)
        qi = scipy.special.expit(propensity)
        measures = rng.binomial(15, qi[:, None], size=(n, 12)).astype(float)
        village = rng.integers(0, n_villages, size=n)
        vavg = np.array([measures[village == v, w].mean()
                         if (village == v).any() else 0.0
                         for v in range(n_villages)])[village]
        female = (rng.random(n) < 0.5).astype(float)
        order = 1 + rng.integers(0, 4, size=n)
        X = np.column_stack([
            measures, vavg, female,
            (order == 1).astype(float), (order == 2).astype(float),
            (order == 3).astype(float), np.ones(n)])
        eta = (0.9 + 0.16 * measures[:, w]
               + 0.05 * measures[:, min(w + 1, 11)]
               + 0.04 * measures[:, max(w - 1, 0)]
               + 0.03 * vavg - 0.08 * female)
        y = rng.poisson(np.exp(np.clip(eta, -10, 3.8)))
        y = np.minimum(y, 61)
        datasets.append(CountDataset(y=y, X=X, names=BATTERY_COVARIATES,
                                     window_label=label))
    return datasets


# ---------------------------------------------------------------------------
# Oracle bias report


DEFAULT_ORACLE_INSTRUMENTS = {
    "guatemala": ("atole", "price_eggs", "price_corn",
                  "lag2_height", "lag2_weight"),
    "philippines": ("price_dried_fish", "price_corn",
                    "lag2_height", "lag2_weight"),
}


def oracle_bias_report(spanel: SyntheticPanel, outcome: str = "height",
                       instrument_names: tuple[str, ...] | None = None,
                       battery=None) -> list[dict]:
    """OLS and IV estimates against the generator's truth.

    Returns one record per (estimator, coefficient) with signed bias and the
    cluster-robust standard error.
    """
    from .estimators import cluster_cov, fit_iv_gmm, fit_liml, fit_ols
    from .ingest import build_growth_observations
    from .sweep import design_matrices
    params = spanel.params
    if instrument_names is None:
        instrument_names = DEFAULT_ORACLE_INSTRUMENTS[params.country]
    table = build_growth_observations(
        spanel.panel, spanel.prices, params.country,
        deflator=spanel.deflator if params.country == "guatemala" else None,
        battery=battery)
    d = design_matrices(table, outcome, "protein_split", instrument_names)
    truth = implied_growth_coefficients(params)[outcome]
    ols = cluster_cov(fit_ols(d), d)
    iv_fit = fit_iv_gmm(d) if len(instrument_names) == d.k1 else fit_liml(d)
    iv = cluster_cov(iv_fit, d)
    rows = []
    for est_name, fit in (("ols", ols), ("iv", iv)):
        for coef_name, true_val in truth.items():
            est = fit.coef[coef_name]
            rows.append({"estimator": est_name, "coefficient": coef_name,
                         "truth": true_val, "estimate": est,
                         "bias": est - true_val, "se": fit.se(coef_name)})
    return rows
