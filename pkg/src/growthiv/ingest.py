"""Panel and price ingestion: loading, validation, imputation, and the
construction of regression-ready growth observations.

Calendar convention: children are anchored to January of their birth year, so
the calendar month of a measurement is (birth_year - 1900) * 12 plus the age
in months (age_days / 30.4375, rounded). Price series are keyed by the same
month index; Guatemalan annual prices sit on December of their year.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DAYS_PER_MONTH = 30.4375
AGE_BAND_DAYS = (6 * DAYS_PER_MONTH - 4.0, 24 * DAYS_PER_MONTH + 4.0)
PROTEIN_KCAL_PER_G = 4.0

COUNTRIES = ("guatemala", "philippines")
MODELS = ("energy", "protein_split")
OUTCOMES = ("height", "weight")

REPORTING_WINDOW_DAYS = {"guatemala": 15, "philippines": 7}

GUATEMALA_PRICE_ITEMS = ("eggs", "chicken", "pork", "beef", "beans", "corn", "rice")
PHILIPPINES_PRICE_ITEMS = ("dried_fish", "eggs", "corn", "tomatoes")

# wet-season months (0 = January); the seasonal dummy is Philippines-only
DEFAULT_SEASON_MONTHS = frozenset(range(5, 11))

PANEL_COLUMNS = (
    "child_id", "community_id", "age_days", "height_cm", "weight_g",
    "protein_g_day", "nonprotein_kcal_day", "suppl_protein_kcal",
    "suppl_nonprotein_kcal", "breastfed", "diar_days", "diar_window_days",
    "female", "birth_order", "birth_year", "atole", "distance_km")

PRICE_COLUMNS = ("item", "scope", "year", "month", "price", "quantity",
                 "unit", "store")

DEFAULT_UNIT_GRAMS = {"g": 1.0, "100g": 100.0, "kg": 1000.0, "lb": 453.59237}


class ValidationError(ValueError):
    """Input fails the documented schema or a type invariant."""


def month_index(year: int, month: int) -> int:
    return (year - 1900) * 12 + (month - 1)


def measurement_month(birth_year: int, age_days: float) -> int:
    return month_index(birth_year, 1) + int(round(age_days / DAYS_PER_MONTH))


def age_month(age_days: float) -> int:
    return int(round(age_days / DAYS_PER_MONTH))


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class ChildObservation:
    """One anthropometric measurement with intakes and covariates."""

    child_id: str
    community_id: str
    age_days: int
    height_cm: float
    weight_g: float
    protein_kcal_day: float          # NaN when missing
    nonprotein_kcal_day: float       # NaN when missing
    supplement_protein_kcal: float
    supplement_nonprotein_kcal: float
    breastfed_last_month: bool
    diarrhea_days_reported: float    # NaN when missing
    reporting_window_days: int
    female: bool
    birth_order: int
    birth_year: int
    atole_village: bool
    distance_to_center: float        # NaN when missing
    protein_imputed: bool = False
    nonprotein_imputed: bool = False


@dataclass(frozen=True)
class PriceSeries:
    """One normalized price point: currency per 100 g."""

    item: str
    scope: str                        # community key or "national"
    month_index: int
    unit_price: float


@dataclass(frozen=True)
class PriceQuote:
    """One raw store quote before normalization."""

    item: str
    store: str
    scope: str
    year: int
    month: int
    price: float
    quantity: float
    unit: str


@dataclass(frozen=True)
class GrowthObservation:
    """One differenced regression row."""

    child_id: str
    period_index: int
    delta_height_cm: float
    delta_weight_g: float
    energy_period_kcal: float
    protein_period_kcal: float
    nonprotein_period_kcal: float
    lag_height_cm: float
    lag_weight_g: float
    lag2_height_cm: float            # NaN when unavailable
    lag2_weight_g: float
    days_no_diar: float
    bf: int
    age_days: float
    female: int
    gap_msmt: float
    season: int
    instruments: dict[str, float]    # NaN marks a missing instrument


# ---------------------------------------------------------------------------
# Columnar containers


_PANEL_FLOAT_COLS = ("height_cm", "weight_g", "protein_kcal_day",
                     "nonprotein_kcal_day", "suppl_protein_kcal",
                     "suppl_nonprotein_kcal", "diar_days", "distance_km")
_PANEL_INT_COLS = ("age_days", "diar_window_days", "birth_order", "birth_year")
_PANEL_BOOL_COLS = ("breastfed", "female", "atole",
                    "protein_imputed", "nonprotein_imputed")


class PanelTable:
    """Column-oriented collection of ChildObservation, canonically ordered."""

    def __init__(self, country: str, child_id, community_id, **columns):
        if country not in COUNTRIES:
            raise ValidationError(f"unknown country {country!r}")
        self.country = country
        self.child_id = np.asarray(child_id, dtype=object)
        self.community_id = np.asarray(community_id, dtype=object)
        n = self.child_id.shape[0]
        for name in _PANEL_FLOAT_COLS:
            col = np.asarray(columns.pop(name), dtype=float)
            setattr(self, name, col)
        for name in _PANEL_INT_COLS:
            setattr(self, name, np.asarray(columns.pop(name), dtype=np.int64))
        for name in _PANEL_BOOL_COLS:
            col = columns.pop(name, np.zeros(n, dtype=bool))
            setattr(self, name, np.asarray(col, dtype=bool))
        if columns:
            raise TypeError(f"unexpected columns {sorted(columns)}")
        for name in (_PANEL_FLOAT_COLS + _PANEL_INT_COLS + _PANEL_BOOL_COLS):
            if getattr(self, name).shape[0] != n:
                raise ValidationError(f"column {name} length mismatch")
        self._sort_canonical()
        self._validate()

    def _sort_canonical(self):
        order = np.lexsort((self.age_days, self.child_id.astype(str)))
        for name in (("child_id", "community_id") + _PANEL_FLOAT_COLS
                     + _PANEL_INT_COLS + _PANEL_BOOL_COLS):
            setattr(self, name, getattr(self, name)[order])
        self.child_codes = np.unique(self.child_id.astype(str),
                                     return_inverse=True)[1]

    def _validate(self):
        def bad(mask, field_name):
            if mask.any():
                i = int(np.flatnonzero(mask)[0])
                raise ValidationError(
                    f"row for child {self.child_id[i]!r} age {self.age_days[i]}: "
                    f"invalid {field_name}")
        bad(~(self.height_cm > 0), "height_cm")
        bad(~(self.weight_g > 0), "weight_g")
        with np.errstate(invalid="ignore"):
            bad(self.protein_kcal_day < 0, "protein_kcal_day")
            bad(self.nonprotein_kcal_day < 0, "nonprotein_kcal_day")
            bad((self.diar_days < 0)
                | (self.diar_days > self.diar_window_days), "diar_days")
        bad(self.suppl_protein_kcal < 0, "suppl_protein_kcal")
        bad(self.suppl_nonprotein_kcal < 0, "suppl_nonprotein_kcal")
        same_child = np.r_[False, self.child_codes[1:] == self.child_codes[:-1]]
        nondecreasing = np.r_[False, np.diff(self.age_days) <= 0]
        dup = same_child & nondecreasing
        if dup.any():
            i = int(np.flatnonzero(dup)[0])
            raise ValidationError(
                f"duplicate or non-increasing age_days for child "
                f"{self.child_id[i]!r} at age {self.age_days[i]}")
        if self.country != "guatemala":
            if (self.suppl_protein_kcal != 0).any() or \
                    (self.suppl_nonprotein_kcal != 0).any():
                raise ValidationError(
                    "supplement kcal must be 0 outside guatemala")

    def __len__(self):
        return self.child_id.shape[0]

    def rows(self):
        for i in range(len(self)):
            yield ChildObservation(
                child_id=str(self.child_id[i]),
                community_id=str(self.community_id[i]),
                age_days=int(self.age_days[i]),
                height_cm=float(self.height_cm[i]),
                weight_g=float(self.weight_g[i]),
                protein_kcal_day=float(self.protein_kcal_day[i]),
                nonprotein_kcal_day=float(self.nonprotein_kcal_day[i]),
                supplement_protein_kcal=float(self.suppl_protein_kcal[i]),
                supplement_nonprotein_kcal=float(self.suppl_nonprotein_kcal[i]),
                breastfed_last_month=bool(self.breastfed[i]),
                diarrhea_days_reported=float(self.diar_days[i]),
                reporting_window_days=int(self.diar_window_days[i]),
                female=bool(self.female[i]),
                birth_order=int(self.birth_order[i]),
                birth_year=int(self.birth_year[i]),
                atole_village=bool(self.atole[i]),
                distance_to_center=float(self.distance_km[i]),
                protein_imputed=bool(self.protein_imputed[i]),
                nonprotein_imputed=bool(self.nonprotein_imputed[i]))

    def copy(self) -> "PanelTable":
        cols = {name: getattr(self, name).copy()
                for name in (_PANEL_FLOAT_COLS + _PANEL_INT_COLS
                             + _PANEL_BOOL_COLS)}
        return PanelTable(self.country, self.child_id.copy(),
                          self.community_id.copy(), **cols)


@dataclass
class PriceReport:
    n_quotes: int = 0
    n_dropped_nonpositive: int = 0
    n_dropped_outlier: int = 0
    n_interpolated: int = 0


class PriceTable:
    """Normalized price series with (item, scope, month) lookup."""

    def __init__(self, series: list[PriceSeries], report: PriceReport | None = None):
        self.series = sorted(series,
                             key=lambda s: (s.item, s.scope, s.month_index))
        self.report = report or PriceReport()
        self._lookup = {(s.item, s.scope, s.month_index): s.unit_price
                        for s in self.series}

    def get(self, item: str, scope: str, month: int) -> float:
        return self._lookup.get((item, scope, month), float("nan"))

    def get_annual(self, item: str, scope: str, year: int) -> float:
        return self.get(item, scope, month_index(year, 12))

    def __len__(self):
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    def __eq__(self, other):
        return isinstance(other, PriceTable) and self.series == other.series

    def as_quotes(self) -> list[PriceQuote]:
        """Re-express the normalized series as single-store quotes per 100 g."""
        return [PriceQuote(item=s.item, store="", scope=s.scope,
                           year=1900 + s.month_index // 12,
                           month=s.month_index % 12 + 1,
                           price=s.unit_price, quantity=1.0, unit="100g")
                for s in self.series]


# ---------------------------------------------------------------------------
# Loading


def _parse(value: str, kind: str, row_num: int, field_name: str,
           allow_missing: bool = False):
    value = value.strip() if value is not None else ""
    if value == "":
        if allow_missing:
            return float("nan") if kind == "float" else None
        raise ValidationError(f"row {row_num}: missing {field_name}")
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            iv = int(value)
            if iv not in (0, 1):
                raise ValueError
            return bool(iv)
    except ValueError:
        pass
    raise ValidationError(f"row {row_num}: malformed {field_name}={value!r}")


def load_panel(path, country: str) -> PanelTable:
    """Read and validate the panel CSV; converts protein grams to kcal."""
    if country not in COUNTRIES:
        raise ValidationError(f"unknown country {country!r}")
    cols: dict[str, list] = {c: [] for c in PANEL_COLUMNS}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PANEL_COLUMNS:
            raise ValidationError(
                f"panel header must be exactly {','.join(PANEL_COLUMNS)}")
        for row_num, row in enumerate(reader, start=2):
            if len(row) != len(PANEL_COLUMNS):
                raise ValidationError(
                    f"row {row_num}: expected {len(PANEL_COLUMNS)} fields, "
                    f"got {len(row)}")
            rec = dict(zip(PANEL_COLUMNS, row))
            cols["child_id"].append(rec["child_id"].strip())
            cols["community_id"].append(rec["community_id"].strip())
            cols["age_days"].append(_parse(rec["age_days"], "int", row_num, "age_days"))
            for f in ("height_cm", "weight_g"):
                cols[f].append(_parse(rec[f], "float", row_num, f))
            cols["protein_g_day"].append(
                _parse(rec["protein_g_day"], "float", row_num, "protein_g_day",
                       allow_missing=True))
            cols["nonprotein_kcal_day"].append(
                _parse(rec["nonprotein_kcal_day"], "float", row_num,
                       "nonprotein_kcal_day", allow_missing=True))
            for f in ("suppl_protein_kcal", "suppl_nonprotein_kcal"):
                cols[f].append(_parse(rec[f], "float", row_num, f))
            cols["breastfed"].append(_parse(rec["breastfed"], "bool", row_num,
                                            "breastfed"))
            cols["diar_days"].append(_parse(rec["diar_days"], "float", row_num,
                                            "diar_days", allow_missing=True))
            cols["diar_window_days"].append(
                _parse(rec["diar_window_days"], "int", row_num,
                       "diar_window_days"))
            cols["female"].append(_parse(rec["female"], "bool", row_num, "female"))
            cols["birth_order"].append(_parse(rec["birth_order"], "int",
                                              row_num, "birth_order"))
            cols["birth_year"].append(_parse(rec["birth_year"], "int",
                                             row_num, "birth_year"))
            cols["atole"].append(_parse(rec["atole"], "bool", row_num, "atole"))
            cols["distance_km"].append(
                _parse(rec["distance_km"], "float", row_num, "distance_km",
                       allow_missing=True))
    protein_kcal = np.asarray(cols.pop("protein_g_day"), dtype=float) \
        * PROTEIN_KCAL_PER_G
    with np.errstate(invalid="ignore"):
        if (protein_kcal < 0).any():
            i = int(np.flatnonzero(protein_kcal < 0)[0])
            raise ValidationError(f"row {i + 2}: invalid protein_g_day")
    table = PanelTable(country, cols.pop("child_id"), cols.pop("community_id"),
                       protein_kcal_day=protein_kcal, **cols)
    log.info("loaded %d panel rows (%s) from %s", len(table), country, path)
    return table


def load_price_quotes(path) -> list[PriceQuote]:
    quotes = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PRICE_COLUMNS:
            raise ValidationError(
                f"price header must be exactly {','.join(PRICE_COLUMNS)}")
        for row_num, row in enumerate(reader, start=2):
            if len(row) != len(PRICE_COLUMNS):
                raise ValidationError(f"row {row_num}: wrong field count")
            rec = dict(zip(PRICE_COLUMNS, row))
            quotes.append(PriceQuote(
                item=rec["item"].strip(), store=rec["store"].strip(),
                scope=rec["scope"].strip(),
                year=_parse(rec["year"], "int", row_num, "year"),
                month=_parse(rec["month"], "int", row_num, "month"),
                price=_parse(rec["price"], "float", row_num, "price"),
                quantity=_parse(rec["quantity"], "float", row_num, "quantity"),
                unit=rec["unit"].strip()))
    return quotes


def load_deflator(path) -> dict[int, float]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ("year", "index"):
            raise ValidationError("deflator header must be year,index")
        for row_num, row in enumerate(reader, start=2):
            year = _parse(row[0], "int", row_num, "year")
            idx = _parse(row[1], "float", row_num, "index")
            if idx <= 0:
                raise ValidationError(f"row {row_num}: non-positive index")
            out[year] = idx
    return out


def _csv_num(x, integer=False) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    if integer or x == int(x):
        return str(int(x))
    return format(x, ".17g")


def write_panel_csv(panel: PanelTable, path) -> None:
    """Inverse of load_panel; protein is written back in grams per day."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PANEL_COLUMNS)
        for i in range(len(panel)):
            w.writerow([
                str(panel.child_id[i]), str(panel.community_id[i]),
                str(int(panel.age_days[i])),
                _csv_num(panel.height_cm[i]), _csv_num(panel.weight_g[i]),
                _csv_num(panel.protein_kcal_day[i] / PROTEIN_KCAL_PER_G),
                _csv_num(panel.nonprotein_kcal_day[i]),
                _csv_num(panel.suppl_protein_kcal[i]),
                _csv_num(panel.suppl_nonprotein_kcal[i]),
                str(int(panel.breastfed[i])),
                _csv_num(panel.diar_days[i]),
                str(int(panel.diar_window_days[i])),
                str(int(panel.female[i])),
                str(int(panel.birth_order[i])),
                str(int(panel.birth_year[i])),
                str(int(panel.atole[i])),
                _csv_num(panel.distance_km[i]),
            ])


def write_price_quotes_csv(prices: PriceTable, path, store: str = "s1") -> None:
    """Write a normalized price table back out as per-100g quotes."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRICE_COLUMNS)
        for s in prices:
            w.writerow([s.item, s.scope, str(1900 + s.month_index // 12),
                        str(s.month_index % 12 + 1), _csv_num(s.unit_price),
                        "1", "100g", store])


def write_deflator_csv(deflator: dict[int, float], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "index"])
        for year in sorted(deflator):
            w.writerow([str(year), _csv_num(deflator[year])])


# ---------------------------------------------------------------------------
# Price preprocessing


def preprocess_prices(quotes, unit_grams: dict | None = None) -> PriceTable:
    """Normalize quotes to currency per 100 g and build monthly series.

    Steps: unit conversion, drop non-positive prices, drop per-item outliers
    (fixed-point median filter at [0.1x, 10x]), average stores within
    (item, scope, month), and fill a missing month whenever both adjacent
    months exist (the survey ran on odd months, so this fills even months).
    The whole pipeline is idempotent on its own output.
    """
    report = PriceReport(n_quotes=len(quotes))
    grams = dict(DEFAULT_UNIT_GRAMS)
    per_item_grams = {}
    if unit_grams:
        for key, g in unit_grams.items():
            if isinstance(key, tuple):
                per_item_grams[key] = float(g)
            else:
                grams[key] = float(g)

    converted: list[tuple[str, str, int, str, float]] = []
    for q in quotes:
        g = per_item_grams.get((q.item, q.unit), grams.get(q.unit))
        if g is None:
            raise ValidationError(f"unknown unit {q.unit!r} for item {q.item!r}")
        if q.price <= 0 or q.quantity <= 0:
            report.n_dropped_nonpositive += 1
            continue
        per100 = q.price * (100.0 / (q.quantity * g))
        converted.append((q.item, q.scope, month_index(q.year, q.month),
                          q.store, per100))

    # per-item outlier filter, iterated to a fixed point so that re-running
    # the pipeline on its own output never drops further quotes
    by_item: dict[str, list] = {}
    for rec in converted:
        by_item.setdefault(rec[0], []).append(rec)
    kept = []
    for item, recs in by_item.items():
        vals = np.array([r[4] for r in recs])
        keep = np.ones(len(recs), dtype=bool)
        while True:
            med = float(np.median(vals[keep]))
            new_keep = keep & (vals >= 0.1 * med) & (vals <= 10.0 * med)
            if new_keep.sum() == keep.sum():
                break
            keep = new_keep
            if not keep.any():
                break
        report.n_dropped_outlier += int((~keep).sum())
        kept.extend(r for r, k in zip(recs, keep) if k)

    # average stores within (item, scope, month)
    cells: dict[tuple, list[float]] = {}
    for item, scope, month, _store, price in kept:
        cells.setdefault((item, scope, month), []).append(price)
    averaged = {key: float(np.mean(v)) for key, v in cells.items()}

    # fill a month when both neighbors exist and it is itself absent
    by_series: dict[tuple, dict[int, float]] = {}
    for (item, scope, month), price in averaged.items():
        by_series.setdefault((item, scope), {})[month] = price
    for (item, scope), months in by_series.items():
        have = sorted(months)
        for m in range(have[0] + 1, have[-1]):
            if m not in months and (m - 1) in have and (m + 1) in have:
                months[m] = 0.5 * (months[m - 1] + months[m + 1])
                report.n_interpolated += 1

    series = [PriceSeries(item=item, scope=scope, month_index=m, unit_price=p)
              for (item, scope), months in by_series.items()
              for m, p in months.items()]
    if report.n_dropped_nonpositive:
        log.warning("dropped %d non-positive price quotes",
                    report.n_dropped_nonpositive)
    return PriceTable(series, report)


# ---------------------------------------------------------------------------
# Intake aggregation, imputation, diarrhea


def aggregate_intakes(start_daily: float, end_daily: float, gap_days: float,
                      supplement_kcal: float = 0.0) -> float:
    """Period intake: mean of the endpoint daily intakes times the gap,
    plus measured supplement totals."""
    if gap_days <= 0:
        raise ValidationError("gap_days must be positive")
    if math.isnan(start_daily) or math.isnan(end_daily):
        return float("nan")
    return 0.5 * (start_daily + end_daily) * gap_days + supplement_kcal


def scale_diarrhea_guatemala(window_days: list[float], gap_days: float,
                             window_len: float = 15.0) -> float:
    """Days with diarrhea for a period, scaled from observed 15-day windows.

    Mean daily rate over the observed windows times the gap, clamped to
    [0, gap_days].
    """
    obs = [d for d in window_days if not math.isnan(d)]
    if not obs:
        return float("nan")
    rate = sum(obs) / (window_len * len(obs))
    return min(max(rate * gap_days, 0.0), gap_days)


def _dummy_matrix(levels: np.ndarray) -> tuple[np.ndarray, dict]:
    uniq = np.unique(levels)
    index = {lv: i for i, lv in enumerate(uniq)}
    D = np.zeros((levels.shape[0], len(uniq) - 1))
    for i, lv in enumerate(levels):
        j = index[lv]
        if j > 0:
            D[i, j - 1] = 1.0
    return D, index


class _IntakeImputer:
    """Pooled dummy regression plus per-child mean residual.

    The per-child intercept and the birth-year dummies are collinear in a
    strict fixed-effects layout, so the model is fit in two stages: age and
    birth-year effects pooled, then a child effect from the residuals.
    """

    def __init__(self, panel: PanelTable, values: np.ndarray):
        self.ages = np.array([age_month(a) for a in panel.age_days])
        observed = ~np.isnan(values)
        A, self.age_index = _dummy_matrix(self.ages[observed])
        B, self.by_index = _dummy_matrix(panel.birth_year[observed])
        X = np.column_stack([np.ones(observed.sum()), A, B])
        self.beta = np.linalg.lstsq(X, values[observed], rcond=None)[0]
        resid = values[observed] - X @ self.beta
        self.child_effect: dict[int, float] = {}
        for code in np.unique(panel.child_codes[observed]):
            self.child_effect[int(code)] = float(
                resid[panel.child_codes[observed] == code].mean())
        self._n_age = len(self.age_index)
        self._n_by = len(self.by_index)

    def predict(self, child_code: int, age_mo: int, birth_year: int) -> float:
        if child_code not in self.child_effect:
            return float("nan")
        if age_mo not in self.age_index or birth_year not in self.by_index:
            return float("nan")
        val = self.beta[0] + self.child_effect[child_code]
        j = self.age_index[age_mo]
        if j > 0:
            val += self.beta[j]
        j = self.by_index[birth_year]
        if j > 0:
            val += self.beta[self._n_age + j]
        return float(val)


def impute_intakes_fe(panel: PanelTable) -> PanelTable:
    """Fill missing daily intakes adjacent to an observed measurement.

    Separate models for protein and non-protein. A gap is filled only when an
    immediately neighboring measurement of the same child has an observed
    value; longer runs of missingness stay missing. Observed values are never
    overwritten; filled rows carry imputation flags.
    """
    out = panel.copy()
    for col, flag in (("protein_kcal_day", "protein_imputed"),
                      ("nonprotein_kcal_day", "nonprotein_imputed")):
        values = getattr(out, col)
        if not np.isnan(values).any():
            continue
        if (~np.isnan(values)).sum() == 0:
            continue
        model = _IntakeImputer(out, values)
        observed = ~np.isnan(values)
        fill = np.zeros(len(out), dtype=bool)
        for i in range(len(out)):
            if observed[i]:
                continue
            code = out.child_codes[i]
            prev_ok = i > 0 and out.child_codes[i - 1] == code and observed[i - 1]
            next_ok = (i + 1 < len(out) and out.child_codes[i + 1] == code
                       and observed[i + 1])
            if prev_ok or next_ok:
                fill[i] = True
        for i in np.flatnonzero(fill):
            pred = model.predict(int(out.child_codes[i]),
                                 age_month(out.age_days[i]),
                                 int(out.birth_year[i]))
            if not math.isnan(pred):
                values[i] = max(pred, 0.0)
                getattr(out, flag)[i] = True
    return out


# ---------------------------------------------------------------------------
# Growth observation construction


class GrowthTable:
    """Column-oriented collection of GrowthObservation."""

    SCALARS = ("delta_height_cm", "delta_weight_g", "energy_period_kcal",
               "protein_period_kcal", "nonprotein_period_kcal",
               "lag_height_cm", "lag_weight_g", "lag2_height_cm",
               "lag2_weight_g", "days_no_diar", "bf", "age_days", "female",
               "gap_msmt", "season")

    def __init__(self, country: str, child_label, period_index, columns: dict,
                 instruments: dict[str, np.ndarray], report=None):
        self.country = country
        self.child_label = np.asarray(child_label, dtype=object)
        self.period_index = np.asarray(period_index, dtype=np.int64)
        for name in self.SCALARS:
            setattr(self, name, np.asarray(columns[name], dtype=float))
        self.instruments = {k: np.asarray(v, dtype=float)
                            for k, v in instruments.items()}
        self.cluster_ids = np.unique(self.child_label.astype(str),
                                     return_inverse=True)[1]
        self.report = report or {}

    def __len__(self):
        return self.child_label.shape[0]

    def rows(self):
        for i in range(len(self)):
            yield GrowthObservation(
                child_id=str(self.child_label[i]),
                period_index=int(self.period_index[i]),
                instruments={k: float(v[i]) for k, v in self.instruments.items()},
                **{name: (int(getattr(self, name)[i])
                          if name in ("bf", "female", "season")
                          else float(getattr(self, name)[i]))
                   for name in self.SCALARS})


def _philippines_window_measures(panel: PanelTable) -> dict[int, np.ndarray]:
    """Per-child vector of the twelve 7-day diarrhea measures (ages 2..24 mo).

    Missing ages contribute 0; the battery covariates require the full
    'past and future' set.
    """
    ages = np.array([age_month(a) for a in panel.age_days])
    out: dict[int, np.ndarray] = {}
    for code in np.unique(panel.child_codes):
        vec = np.zeros(12)
        sel = panel.child_codes == code
        for a, dval in zip(ages[sel], panel.diar_days[sel]):
            if 2 <= a <= 24 and a % 2 == 0 and not math.isnan(dval):
                vec[a // 2 - 1] = dval
        out[int(code)] = vec
    return out


def _village_age_avg(panel: PanelTable) -> dict[tuple, float]:
    ages = np.array([age_month(a) for a in panel.age_days])
    sums: dict[tuple, list] = {}
    for i in range(len(panel)):
        if math.isnan(panel.diar_days[i]):
            continue
        key = (str(panel.community_id[i]), int(ages[i]))
        sums.setdefault(key, []).append(panel.diar_days[i])
    return {k: float(np.mean(v)) for k, v in sums.items()}


def instrument_catalog(country: str) -> tuple[str, ...]:
    if country == "guatemala":
        return (("atole", "atole_dist", "lag2_height", "lag2_weight")
                + tuple(f"price_{it}" for it in GUATEMALA_PRICE_ITEMS))
    if country == "philippines":
        return (("lag2_height", "lag2_weight")
                + tuple(f"price_{it}" for it in PHILIPPINES_PRICE_ITEMS)
                + tuple(f"price_{it}_lag" for it in PHILIPPINES_PRICE_ITEMS))
    raise ValidationError(f"unknown country {country!r}")


def build_growth_observations(panel: PanelTable, prices: PriceTable | None,
                              country: str, model: str = "protein_split",
                              deflator: dict[int, float] | None = None,
                              battery=None,
                              season_months=DEFAULT_SEASON_MONTHS,
                              age_band=AGE_BAND_DAYS) -> GrowthTable:
    """One regression row per consecutive measurement pair inside the age band.

    Rows missing a required regressor are dropped (counted in the report);
    rows missing only instrument values are kept with those instruments
    flagged, so each instrument set can use its own maximal subsample.
    """
    if country not in COUNTRIES:
        raise ValidationError(f"unknown country {country!r}")
    if model not in MODELS:
        raise ValidationError(f"unknown model {model!r}")
    if country == "philippines" and battery is None:
        raise ValidationError(
            "philippines needs a fitted diarrhea battery to resolve days_no_diar")

    cat = instrument_catalog(country)
    cols: dict[str, list] = {name: [] for name in GrowthTable.SCALARS}
    instruments: dict[str, list] = {name: [] for name in cat}
    child_label, period_idx = [], []
    report = {"excluded_missing_intake": 0, "excluded_missing_diar": 0,
              "rows": 0}

    if country == "philippines":
        measures = _philippines_window_measures(panel)
        vavg = _village_age_avg(panel)

    codes = panel.child_codes
    for code in np.unique(codes):
        idx = np.flatnonzero(codes == code)
        for pos in range(1, len(idx)):
            i0, i1 = idx[pos - 1], idx[pos]
            a0, a1 = panel.age_days[i0], panel.age_days[i1]
            if not (age_band[0] <= a0 and a1 <= age_band[1]):
                continue
            gap = float(a1 - a0)
            prot = aggregate_intakes(panel.protein_kcal_day[i0],
                                     panel.protein_kcal_day[i1], gap,
                                     panel.suppl_protein_kcal[i1])
            nonprot = aggregate_intakes(panel.nonprotein_kcal_day[i0],
                                        panel.nonprotein_kcal_day[i1], gap,
                                        panel.suppl_nonprotein_kcal[i1])
            if math.isnan(prot) or math.isnan(nonprot):
                report["excluded_missing_intake"] += 1
                continue
            if country == "guatemala":
                days_with = scale_diarrhea_guatemala(
                    [panel.diar_days[i1]], gap,
                    window_len=panel.diar_window_days[i1])
            else:
                mo = age_month(a1)
                window = battery.window_for_end_age(mo)
                if window is None:
                    days_with = float("nan")
                else:
                    x = battery.covariate_row(
                        measures[int(code)],
                        vavg.get((str(panel.community_id[i1]), mo), 0.0),
                        float(panel.female[i1]), int(panel.birth_order[i1]))
                    days_with = min(window.predict(x, clamp_max=gap), gap)
            if math.isnan(days_with):
                report["excluded_missing_diar"] += 1
                continue

            month1 = measurement_month(int(panel.birth_year[i1]), float(a1))
            vals = dict.fromkeys(cat, float("nan"))
            if country == "guatemala":
                vals["atole"] = float(panel.atole[i1])
                dist = panel.distance_km[i1]
                vals["atole_dist"] = (float(panel.atole[i1]) * dist
                                      if not math.isnan(dist) else float("nan"))
                year = 1900 + month1 // 12
                for it in GUATEMALA_PRICE_ITEMS:
                    p = prices.get_annual(it, "national", year - 1) \
                        if prices is not None else float("nan")
                    if deflator is not None and not math.isnan(p):
                        if (year - 1) not in deflator:
                            raise ValidationError(
                                f"deflator missing year {year - 1}")
                        p = p / deflator[year - 1]
                    vals[f"price_{it}"] = p
            else:
                comm = str(panel.community_id[i1])
                for it in PHILIPPINES_PRICE_ITEMS:
                    if prices is not None:
                        vals[f"price_{it}"] = prices.get(it, comm, month1)
                        vals[f"price_{it}_lag"] = prices.get(it, comm, month1 - 2)
            if pos >= 2:
                i2 = idx[pos - 2]
                vals["lag2_height"] = float(panel.height_cm[i2])
                vals["lag2_weight"] = float(panel.weight_g[i2])

            child_label.append(str(panel.child_id[i1]))
            period_idx.append(pos)
            cols["delta_height_cm"].append(panel.height_cm[i1] - panel.height_cm[i0])
            cols["delta_weight_g"].append(panel.weight_g[i1] - panel.weight_g[i0])
            cols["protein_period_kcal"].append(prot)
            cols["nonprotein_period_kcal"].append(nonprot)
            cols["energy_period_kcal"].append(prot + nonprot)
            cols["lag_height_cm"].append(float(panel.height_cm[i0]))
            cols["lag_weight_g"].append(float(panel.weight_g[i0]))
            cols["lag2_height_cm"].append(vals.get("lag2_height", float("nan")))
            cols["lag2_weight_g"].append(vals.get("lag2_weight", float("nan")))
            cols["days_no_diar"].append(gap - days_with)
            cols["bf"].append(float(panel.breastfed[i1]))
            cols["age_days"].append(float(a1))
            cols["female"].append(float(panel.female[i1]))
            cols["gap_msmt"].append(gap)
            cols["season"].append(
                float(month1 % 12 in season_months)
                if country == "philippines" else 0.0)
            for name in cat:
                instruments[name].append(vals[name])
            report["rows"] += 1

    table = GrowthTable(country, child_label, period_idx, cols,
                        instruments, report)
    log.info("built %d growth rows (%s); excluded %d missing-intake, "
             "%d missing-diarrhea", len(table), country,
             report["excluded_missing_intake"],
             report["excluded_missing_diar"])
    return table
