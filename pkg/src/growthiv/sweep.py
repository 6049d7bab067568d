"""Instrument-set enumeration and the specification sweep.

Guatemala sets always contain the supplementation-village indicator; the
energy model additionally allows the two-price family that is exactly
identified with its three endogenous regressors (that family drops out of
the protein/non-protein model, which has four). Philippine sets combine the
eight community price series with optional second lags. Set ids are the
position in this canonical enumeration and are stable across runs.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .diagnostics import DiagnosticsReport, full_report
from .estimators import (DesignMatrices, EstimationError, FitResult,
                         cluster_cov, fit_iv_gmm, fit_liml, fit_ols)
from .ingest import (COUNTRIES, GUATEMALA_PRICE_ITEMS, MODELS, OUTCOMES,
                     PHILIPPINES_PRICE_ITEMS, GrowthTable)

log = logging.getLogger(__name__)

Z_CRIT_5PCT = 1.96

EXOG_COLUMNS = ("days_no_diar", "bf", "age_days", "age_sq", "female",
                "gap_msmt")


class SweepError(ValueError):
    pass


@dataclass(frozen=True)
class InstrumentSet:
    id: int
    names: tuple[str, ...]
    country: str
    model: str
    outcome: str

    @property
    def m(self) -> int:
        return len(self.names)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise SweepError(f"duplicate instrument in set {self.names}")


@dataclass(frozen=True)
class SpecResult:
    set: InstrumentSet
    status: str                     # ok | skipped_rank | skipped_underidentified | skipped_sample
    n_used: int
    fit: FitResult | None = None
    diagnostics: DiagnosticsReport | None = None
    error: str = ""

    def __post_init__(self):
        ok = self.status == "ok"
        if ok != (self.fit is not None and self.diagnostics is not None):
            raise SweepError("status=ok iff fit and diagnostics present")


@dataclass(frozen=True)
class SweepSummary:
    filter_label: str
    coefficient: str
    n_specs: int
    p25: float
    p50: float
    p75: float
    pct_sig_pos: float
    pct_sig_neg: float
    suppressed: bool

    def __post_init__(self):
        if not self.suppressed and not (self.p25 <= self.p50 <= self.p75):
            raise SweepError("percentiles out of order")


@dataclass(frozen=True)
class FilterCriteria:
    label: str
    overidentified_only: bool = False
    min_cd: float = 0.0
    min_hj_p: float = 0.0


DEFAULT_FILTERS = (
    FilterCriteria("All IV"),
    FilterCriteria("All Over-Identified IV", overidentified_only=True),
    FilterCriteria("CD>1 P-val HJ>5", overidentified_only=True,
                   min_cd=1.0, min_hj_p=0.05),
    FilterCriteria("CD>3 P-val HJ>5", overidentified_only=True,
                   min_cd=3.0, min_hj_p=0.05),
    FilterCriteria("CD>7 P-val HJ>5", overidentified_only=True,
                   min_cd=7.0, min_hj_p=0.05),
)


# ---------------------------------------------------------------------------
# Enumeration


def _combos(prices: tuple[str, ...], sizes: tuple[int, ...]):
    for size in sizes:
        yield from itertools.combinations(prices, size)


def enumerate_sets(country: str, model: str, outcome: str,
                   price_names: tuple[str, ...] | None = None
                   ) -> list[InstrumentSet]:
    """Canonical instrument-set families for one (country, model, outcome)."""
    if country not in COUNTRIES:
        raise SweepError(f"unknown country {country!r}")
    if model not in MODELS:
        raise SweepError(f"unknown model {model!r}")
    if outcome not in OUTCOMES:
        raise SweepError(f"unknown outcome {outcome!r}")
    lag2_other = "lag2_weight" if outcome == "height" else "lag2_height"
    sets: list[tuple[str, ...]] = []
    if country == "guatemala":
        prices = price_names or tuple(
            f"price_{it}" for it in GUATEMALA_PRICE_ITEMS)
        base_sizes = (2, 3, 4) if model == "energy" else (3, 4)
        families = [
            (("atole",), base_sizes),
            (("atole", "atole_dist"), (2, 3, 4)),
            (("atole", lag2_other), (2, 3, 4)),
            (("atole", "atole_dist", lag2_other), (2, 3, 4)),
            (("atole", "lag2_height", "lag2_weight"), (2, 3, 4)),
            (("atole", "atole_dist", "lag2_height", "lag2_weight"), (2, 3, 4)),
        ]
    else:
        prices = price_names or (
            tuple(f"price_{it}" for it in PHILIPPINES_PRICE_ITEMS)
            + tuple(f"price_{it}_lag" for it in PHILIPPINES_PRICE_ITEMS))
        families = [
            ((), (4, 5, 6)),
            ((lag2_other,), (3, 4, 5, 6)),
            (("lag2_height", "lag2_weight"), (2, 3, 4, 5, 6)),
        ]
    for fixed, sizes in families:
        for combo in _combos(prices, sizes):
            sets.append(fixed + combo)
    return [InstrumentSet(id=i, names=names, country=country, model=model,
                          outcome=outcome)
            for i, names in enumerate(sets)]


# ---------------------------------------------------------------------------
# Design assembly


def model_endog_columns(model: str) -> tuple[tuple[str, str], ...]:
    """(coefficient name, growth-table column) pairs for the endogenous block."""
    if model == "energy":
        intake = (("energy", "energy_period_kcal"),)
    else:
        intake = (("protein", "protein_period_kcal"),
                  ("nonprotein", "nonprotein_period_kcal"))
    return intake + (("lag_weight", "lag_weight_g"),
                     ("lag_height", "lag_height_cm"))


def design_matrices(table: GrowthTable, outcome: str, model: str,
                    instrument_names: tuple[str, ...]) -> DesignMatrices:
    """Subset to rows with all required values and assemble the matrices."""
    if outcome not in OUTCOMES:
        raise SweepError(f"unknown outcome {outcome!r}")
    y = table.delta_height_cm if outcome == "height" else table.delta_weight_g
    endog_pairs = model_endog_columns(model)
    endog_cols = [getattr(table, col) for _n, col in endog_pairs]
    exog_cols = [np.ones(len(table))]
    exog_names = ["const"]
    for name in EXOG_COLUMNS:
        if name == "age_sq":
            exog_cols.append(table.age_days ** 2)
        else:
            exog_cols.append(getattr(table, name))
        exog_names.append("age" if name == "age_days" else name)
    if table.country == "philippines":
        exog_cols.append(table.season)
        exog_names.append("season")
    iv_cols = []
    for name in instrument_names:
        if name not in table.instruments:
            raise SweepError(f"unknown instrument {name!r}")
        iv_cols.append(table.instruments[name])
    mask = np.isfinite(y)
    for col in endog_cols + exog_cols + iv_cols:
        mask &= np.isfinite(col)
    idx = np.flatnonzero(mask)
    return DesignMatrices(
        y=y[idx],
        X_endog=np.column_stack([c[idx] for c in endog_cols]),
        X_exog=np.column_stack([c[idx] for c in exog_cols]),
        Z_excl=(np.column_stack([c[idx] for c in iv_cols])
                if iv_cols else np.empty((idx.size, 0))),
        cluster_ids=table.cluster_ids[idx],
        endog_names=tuple(n for n, _c in endog_pairs),
        exog_names=tuple(exog_names),
        instrument_names=tuple(instrument_names))


# ---------------------------------------------------------------------------
# Sweep execution


def run_single_spec(table: GrowthTable, iv_set: InstrumentSet) -> SpecResult:
    k1 = len(model_endog_columns(iv_set.model))
    if iv_set.m < k1:
        return SpecResult(set=iv_set, status="skipped_underidentified", n_used=0)
    try:
        d = design_matrices(table, iv_set.outcome, iv_set.model, iv_set.names)
    except (EstimationError, SweepError) as exc:
        return SpecResult(set=iv_set, status="skipped_sample", n_used=0,
                          error=str(exc))
    n_used = d.n
    if n_used < d.k1 + d.k2 + d.m + 5 or d.n_clusters < 2:
        return SpecResult(set=iv_set, status="skipped_sample", n_used=n_used)
    try:
        m_eff = d.pruned_instruments()[0].shape[1]
        if m_eff < k1:
            return SpecResult(set=iv_set, status="skipped_underidentified",
                              n_used=n_used)
        fit = fit_iv_gmm(d) if m_eff == k1 else fit_liml(d)
        fit = cluster_cov(fit, d)
        ols = cluster_cov(fit_ols(d), d)
        diag = full_report(fit, ols, d)
    except EstimationError as exc:
        return SpecResult(set=iv_set, status="skipped_rank", n_used=n_used,
                          error=str(exc))
    return SpecResult(set=iv_set, status="ok", n_used=n_used, fit=fit,
                      diagnostics=diag)


_WORKER_TABLE: GrowthTable | None = None


def _worker_init(table: GrowthTable):
    global _WORKER_TABLE
    _WORKER_TABLE = table


def _worker_run(iv_set: InstrumentSet) -> SpecResult:
    return run_single_spec(_WORKER_TABLE, iv_set)


def run_sweep(table: GrowthTable, sets: list[InstrumentSet],
              workers: int = 1) -> list[SpecResult]:
    """Run every specification; output ordered by set id regardless of the
    execution schedule, so the worker count never changes the result."""
    if not sets:
        raise SweepError("empty instrument-set list")
    if workers <= 1:
        results = [run_single_spec(table, s) for s in sets]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                 initargs=(table,)) as pool:
            results = list(pool.map(_worker_run, sets, chunksize=16))
    results.sort(key=lambda r: r.set.id)
    n_ok = sum(r.status == "ok" for r in results)
    log.info("sweep: %d/%d specifications ok", n_ok, len(results))
    return results


# ---------------------------------------------------------------------------
# Filtering and summaries


def filter_specs(results: list[SpecResult],
                 criteria: FilterCriteria) -> list[SpecResult]:
    out = []
    needs_overid = criteria.overidentified_only or criteria.min_hj_p > 0
    for r in results:
        if r.status != "ok":
            continue
        if not (r.diagnostics.kp_wald_f > criteria.min_cd):
            continue
        over_identified = r.diagnostics.hj_p is not None
        if needs_overid and not over_identified:
            continue
        if over_identified and needs_overid \
                and not (r.diagnostics.hj_p > criteria.min_hj_p):
            continue
        out.append(r)
    return out


def percentile(values: np.ndarray, p: float) -> float:
    """Linear interpolation at rank (n-1)p on the sorted values."""
    return float(np.percentile(np.asarray(values, dtype=float), p,
                               method="linear"))


def summarize(filtered: list[SpecResult], coefficient: str,
              filter_label: str = "", min_count: int = 10,
              display_scale: float = 1.0) -> SweepSummary:
    """Percentiles and share significant at 5 percent (two-sided normal).

    The row is marked suppressed when n_specs <= min_count; height
    coefficients are scaled by 1000 for table display via display_scale.
    """
    n = len(filtered)
    if n <= min_count:
        return SweepSummary(filter_label=filter_label, coefficient=coefficient,
                            n_specs=n, p25=float("nan"), p50=float("nan"),
                            p75=float("nan"), pct_sig_pos=float("nan"),
                            pct_sig_neg=float("nan"), suppressed=True)
    coefs, tstats = [], []
    for r in filtered:
        if coefficient not in r.fit.coef:
            raise SweepError(f"coefficient {coefficient!r} missing from fit")
        coefs.append(r.fit.coef[coefficient])
        tstats.append(r.fit.tstat(coefficient))
    coefs = np.asarray(coefs)
    tstats = np.asarray(tstats)
    return SweepSummary(
        filter_label=filter_label, coefficient=coefficient, n_specs=n,
        p25=percentile(coefs, 25) * display_scale,
        p50=percentile(coefs, 50) * display_scale,
        p75=percentile(coefs, 75) * display_scale,
        pct_sig_pos=100.0 * float((tstats > Z_CRIT_5PCT).mean()),
        pct_sig_neg=100.0 * float((tstats < -Z_CRIT_5PCT).mean()),
        suppressed=False)


def figure_data(filtered: list[SpecResult], coefficient: str) -> list[dict]:
    """(ln CD, coef, 95 percent CI, set id) rows, ordered by set id."""
    rows = []
    n_dropped = 0
    for r in sorted(filtered, key=lambda r: r.set.id):
        cd = r.diagnostics.kp_wald_f
        if not cd > 0:
            n_dropped += 1
            continue
        coef = r.fit.coef[coefficient]
        se = r.fit.se(coefficient)
        rows.append({"set_id": r.set.id, "ln_cd": float(np.log(cd)),
                     "coef": coef, "ci_low": coef - Z_CRIT_5PCT * se,
                     "ci_high": coef + Z_CRIT_5PCT * se})
    if n_dropped:
        log.warning("figure_data dropped %d rows with non-positive CD",
                    n_dropped)
    return rows


# ---------------------------------------------------------------------------
# Serialization (all reals at 17 significant digits)


def fmt17(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if np.isnan(x):
        return ""
    return format(x, ".17g")


def spec_csv_header(model: str, country: str) -> list[str]:
    endog = [n for n, _c in model_endog_columns(model)]
    exog = ["const", "days_no_diar", "bf", "age", "age_sq", "female",
            "gap_msmt"] + (["season"] if country == "philippines" else [])
    cols = ["set_id", "country", "model", "outcome", "instruments", "m",
            "n_used", "n_clusters", "status", "method", "kappa"]
    for name in endog + exog:
        cols += [f"coef_{name}", f"se_{name}"]
    cols += ["kp_wald_f", "underid_stat", "underid_df", "underid_p",
             "hj_stat", "hj_df", "hj_p", "hausman_stat", "hausman_df",
             "hausman_p"]
    cols += [f"ap_f_{name}" for name in endog]
    cols += ["error"]
    return cols


def spec_csv_row(r: SpecResult, header: list[str]) -> list[str]:
    base = {
        "set_id": str(r.set.id), "country": r.set.country,
        "model": r.set.model, "outcome": r.set.outcome,
        "instruments": ";".join(r.set.names), "m": str(r.set.m),
        "n_used": str(r.n_used), "status": r.status, "error": r.error,
        "n_clusters": str(r.fit.n_clusters) if r.fit else "",
        "method": r.fit.method if r.fit else "",
        "kappa": fmt17(r.fit.kappa) if r.fit else "",
    }
    if r.fit is not None:
        for name in r.fit.names:
            base[f"coef_{name}"] = fmt17(r.fit.coef[name])
            base[f"se_{name}"] = fmt17(r.fit.se(name))
    if r.diagnostics is not None:
        dg = r.diagnostics
        base.update({
            "kp_wald_f": fmt17(dg.kp_wald_f),
            "underid_stat": fmt17(dg.underid_stat),
            "underid_df": str(dg.underid_df),
            "underid_p": fmt17(dg.underid_p),
            "hj_stat": fmt17(dg.hj_stat), "hausman_stat": fmt17(dg.hausman_stat),
            "hj_df": "" if dg.hj_df is None else str(dg.hj_df),
            "hj_p": fmt17(dg.hj_p),
            "hausman_df": "" if dg.hausman_df is None else str(dg.hausman_df),
            "hausman_p": fmt17(dg.hausman_p),
        })
        for name, f in dg.ap_partial_f.items():
            base[f"ap_f_{name}"] = fmt17(f)
    return [base.get(col, "") for col in header]


def write_specs_csv(path, results: list[SpecResult]):
    import csv
    if not results:
        raise SweepError("no results to write")
    header = spec_csv_header(results[0].set.model, results[0].set.country)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in results:
            w.writerow(spec_csv_row(r, header))


def write_summary_csv(path, summaries: list[SweepSummary]):
    import csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filter", "coefficient", "n_specs", "p25", "p50", "p75",
                    "pct_sig_pos", "pct_sig_neg", "suppressed"])
        for s in summaries:
            w.writerow([s.filter_label, s.coefficient, str(s.n_specs),
                        fmt17(s.p25), fmt17(s.p50), fmt17(s.p75),
                        fmt17(s.pct_sig_pos), fmt17(s.pct_sig_neg),
                        "1" if s.suppressed else "0"])


def write_figure_csv(path, rows: list[dict]):
    import csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set_id", "ln_cd", "coef", "ci_low", "ci_high"])
        for r in rows:
            w.writerow([str(r["set_id"]), fmt17(r["ln_cd"]), fmt17(r["coef"]),
                        fmt17(r["ci_low"]), fmt17(r["ci_high"])])
