"""Federated logistic mixed-model association scans with reference-projection covariates."""

from .estimators import LinearAssociationScan, LogisticMixedScan, scan_sites
from .federation import FederationConfig, SiteWorker, run_inprocess
from .projection import ReferenceProjection, compute_reference_loadings, projection_covariates
from .simulation import SimSpec, simulate_populations

__version__ = "0.1.0"

__all__ = [
    "FederationConfig",
    "LinearAssociationScan",
    "LogisticMixedScan",
    "ReferenceProjection",
    "SimSpec",
    "SiteWorker",
    "compute_reference_loadings",
    "projection_covariates",
    "run_inprocess",
    "scan_sites",
    "simulate_populations",
]
