"""Growth production functions with endogenous nutrient inputs.

Estimates dynamic height/weight growth equations by IV (exactly-identified
GMM) and LIML with cluster-robust inference, sweeps combinatorial instrument
sets with weak-instrument and over-identification diagnostics, summarizes
coefficient distributions, simulates dietary counterfactuals, fits the count
models used to extrapolate diarrhea days, and generates synthetic panels from
the structural model for validation.
"""

from .estimators import (DesignMatrices, EstimationError, FitResult,
                         cluster_cov, fit_iv_gmm, fit_liml, fit_ols)
from .diagnostics import (DiagnosticsReport, ap_partial_f, hansen_j, hausman,
                          kp_wald_f, underid_test)

__version__ = "0.1.0"

__all__ = [
    "DesignMatrices", "EstimationError", "FitResult",
    "fit_ols", "fit_iv_gmm", "fit_liml", "cluster_cov",
    "DiagnosticsReport", "hansen_j", "kp_wald_f", "underid_test",
    "ap_partial_f", "hausman",
    "__version__",
]
