"""Median-prediction arithmetic and the dynamic intake intervention.

The intervention simulation iterates the fitted height and weight equations
forward with and without the scenario's intake increments, carrying the
induced changes in lagged height and weight through both equations' lag
coefficients. The system is linear, so the reported trajectory delta is
independent of the baseline levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimators import FitResult
from .ingest import PROTEIN_KCAL_PER_G
from .sweep import FilterCriteria, SpecResult, filter_specs, percentile

EGG_PROTEIN_G = 5.5
EGG_NONPROTEIN_KCAL = 40.9
EGG_PROTEIN_KCAL = EGG_PROTEIN_G * PROTEIN_KCAL_PER_G

MEDIAN_PREDICTION_FILTER = FilterCriteria(
    "CD>7 P-val HJ>5", overidentified_only=True, min_cd=7.0, min_hj_p=0.05)
MEDIAN_PREDICTION_FALLBACK = FilterCriteria(
    "CD>3 P-val HJ>5", overidentified_only=True, min_cd=3.0, min_hj_p=0.05)
MIN_SPECS_FOR_PREDICTION = 10


class CounterfactualError(ValueError):
    pass


@dataclass(frozen=True)
class InterventionScenario:
    """Constant or scheduled daily intake increments."""

    protein_kcal_per_day: float = 0.0
    nonprotein_kcal_per_day: float = 0.0
    days_per_period: int = 90
    n_periods: int = 1
    schedule: tuple[tuple[float, float], ...] | None = None
    allow_negative: bool = False

    def __post_init__(self):
        if self.n_periods < 1:
            raise CounterfactualError("n_periods must be >= 1")
        if self.days_per_period <= 0:
            raise CounterfactualError("days_per_period must be positive")
        if not self.allow_negative:
            incs = [self.protein_kcal_per_day, self.nonprotein_kcal_per_day]
            if self.schedule:
                incs += [v for pair in self.schedule for v in pair]
            if any(v < 0 for v in incs):
                raise CounterfactualError(
                    "negative increments need allow_negative=True")

    def period_increments(self) -> np.ndarray:
        """(n_periods, 2) array of per-period kcal increments."""
        if self.schedule is not None:
            if len(self.schedule) != self.n_periods:
                raise CounterfactualError("schedule length != n_periods")
            daily = np.asarray(self.schedule, dtype=float)
        else:
            daily = np.tile([self.protein_kcal_per_day,
                             self.nonprotein_kcal_per_day],
                            (self.n_periods, 1))
        return daily * self.days_per_period

    @classmethod
    def one_egg_per_week(cls, days_per_period: int = 60,
                         n_periods: int = 9) -> "InterventionScenario":
        """One egg per week: 22 protein kcal and 40.9 other kcal per 7 days."""
        return cls(protein_kcal_per_day=EGG_PROTEIN_KCAL / 7.0,
                   nonprotein_kcal_per_day=EGG_NONPROTEIN_KCAL / 7.0,
                   days_per_period=days_per_period, n_periods=n_periods)


@dataclass(frozen=True)
class TrajectoryDelta:
    """Per-period and cumulative anthropometric changes from a scenario."""

    height_per_period_cm: np.ndarray
    weight_per_period_g: np.ndarray

    @property
    def cumulative_height_cm(self) -> np.ndarray:
        return np.cumsum(self.height_per_period_cm)

    @property
    def cumulative_weight_g(self) -> np.ndarray:
        return np.cumsum(self.weight_per_period_g)

    @property
    def total_height_cm(self) -> float:
        return float(self.height_per_period_cm.sum())

    @property
    def total_weight_g(self) -> float:
        return float(self.weight_per_period_g.sum())


# ---------------------------------------------------------------------------
# Median prediction


def median_prediction_filter(results: list[SpecResult]) -> tuple[list[SpecResult], str]:
    """CD>7 with HJ p>0.05, falling back to CD>3 when fewer than ten survive."""
    primary = filter_specs(results, MEDIAN_PREDICTION_FILTER)
    if len(primary) >= MIN_SPECS_FOR_PREDICTION:
        return primary, MEDIAN_PREDICTION_FILTER.label
    fallback = filter_specs(results, MEDIAN_PREDICTION_FALLBACK)
    return fallback, MEDIAN_PREDICTION_FALLBACK.label


def median_prediction(filtered: list[SpecResult] | list[float],
                      coefficient: str, increment_per_day: float,
                      days_per_period: int,
                      increment_unit: str = "kcal") -> float:
    """Median coefficient times total increment over one measurement period.

    `increment_per_day` is kcal/day, or grams/day of protein with
    increment_unit="g_protein" (converted at 4 kcal/g). Coefficients are in
    natural units (outcome per period kcal).
    """
    if increment_unit == "g_protein":
        increment_per_day = increment_per_day * PROTEIN_KCAL_PER_G
    elif increment_unit != "kcal":
        raise CounterfactualError(f"unknown increment unit {increment_unit!r}")
    if len(filtered) == 0:
        raise CounterfactualError("no specifications after filtering")
    if filtered and isinstance(filtered[0], SpecResult):
        coefs = [r.fit.coef[coefficient] for r in filtered]
    else:
        coefs = [float(c) for c in filtered]
    med = percentile(np.asarray(coefs), 50)
    return med * increment_per_day * days_per_period


def select_best_spec(results: list[SpecResult]) -> SpecResult:
    """Among specs with HJ p > 0.05, the one with the highest CD statistic;
    ties broken by lowest set id."""
    qualifying = [r for r in results
                  if r.status == "ok" and r.diagnostics.hj_p is not None
                  and r.diagnostics.hj_p > 0.05]
    if not qualifying:
        raise CounterfactualError("no specification with HJ p-value > 0.05")
    return max(qualifying,
               key=lambda r: (r.diagnostics.kp_wald_f, -r.set.id))


# ---------------------------------------------------------------------------
# Dynamic simulation


def _lag_coefs(fit: FitResult) -> tuple[float, float]:
    return fit.coef["lag_weight"], fit.coef["lag_height"]


def _intake_coefs(fit: FitResult) -> tuple[float, float]:
    return fit.coef["protein"], fit.coef["nonprotein"]


def simulate_intervention(height_fit: FitResult, weight_fit: FitResult,
                          baseline_periods: int,
                          scenario: InterventionScenario,
                          cross_lag_feedback: bool = True) -> TrajectoryDelta:
    """Difference of two forward passes of the fitted growth equations.

    Controls and baseline intakes cancel in the difference, so only the lag
    coefficients and the intake increments matter. `cross_lag_feedback=False`
    zeroes the complement equation's lag terms (height responding to lagged
    weight and vice versa) for sensitivity runs.
    """
    for fit, label in ((height_fit, "height"), (weight_fit, "weight")):
        if "protein" not in fit.coef or "nonprotein" not in fit.coef:
            raise CounterfactualError(
                f"{label} fit is not from the protein/non-protein model")
    if scenario.n_periods > baseline_periods:
        raise CounterfactualError(
            f"scenario horizon {scenario.n_periods} exceeds baseline "
            f"({baseline_periods} periods)")
    inc = scenario.period_increments()
    lp_h, lnp_h = _intake_coefs(height_fit)
    lp_w, lnp_w = _intake_coefs(weight_fit)
    rw_h, rh_h = _lag_coefs(height_fit)
    rw_w, rh_w = _lag_coefs(weight_fit)
    if not cross_lag_feedback:
        rw_h = 0.0   # lagged weight in the height equation
        rh_w = 0.0   # lagged height in the weight equation
    dh = np.zeros(scenario.n_periods)
    dw = np.zeros(scenario.n_periods)
    level_h = 0.0
    level_w = 0.0
    for t in range(scenario.n_periods):
        dh[t] = lp_h * inc[t, 0] + lnp_h * inc[t, 1] \
            + rw_h * level_w + rh_h * level_h
        dw[t] = lp_w * inc[t, 0] + lnp_w * inc[t, 1] \
            + rw_w * level_w + rh_w * level_h
        level_h += dh[t]
        level_w += dw[t]
    return TrajectoryDelta(height_per_period_cm=dh, weight_per_period_g=dw)
