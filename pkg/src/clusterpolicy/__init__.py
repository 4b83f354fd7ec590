"""Cross-fitted estimation of counterfactual policy effects in clustered data."""
from __future__ import annotations

from .data import ClusterObservation, Dataset, validate_dataset
from .estimator import (
    EstimandSpec,
    EstimateReport,
    EstimatorConfig,
    estimate,
    estimate_ipw,
    uncentered_eif_mu,
    uncentered_eif_mu_t,
    variance,
)
from .policies import CIPS, CMS, TPB, TypeB, parse_policy

__version__ = "0.1.0"

__all__ = [
    "ClusterObservation", "Dataset", "validate_dataset", "EstimandSpec", "EstimateReport",
    "EstimatorConfig", "estimate", "estimate_ipw", "uncentered_eif_mu", "uncentered_eif_mu_t",
    "variance", "CIPS", "CMS", "TPB", "TypeB", "parse_policy",
]
