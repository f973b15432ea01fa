"""Bayesian latent-class mixed models for multivariate longitudinal outcomes with excess zeros."""

from .diagnostics import (
    DiagnosticsReport,
    PedReport,
    adjusted_rand_index,
    compute_deviance,
    compute_ped,
    diagnose,
    gelman_rubin,
    posterior_membership,
    relabel,
)
from .engine import ChainOutput, McmcConfig, SamplerError, run_chain, run_chains
from .kernels import Model, SweepState, sweep
from .model import (
    DatasetError,
    FamilyMismatchError,
    FamilySpec,
    FeatureData,
    IdentifiabilityError,
    LongitudinalDataset,
    Priors,
    validate_dataset,
)
from .simulate import SimScenario, generate_dataset, hrs_shaped_scenario, two_outcome_scenario

__version__ = "0.1.0"

__all__ = [
    "ChainOutput",
    "DatasetError",
    "DiagnosticsReport",
    "FamilyMismatchError",
    "FamilySpec",
    "FeatureData",
    "IdentifiabilityError",
    "LongitudinalDataset",
    "McmcConfig",
    "Model",
    "PedReport",
    "Priors",
    "SamplerError",
    "SimScenario",
    "SweepState",
    "adjusted_rand_index",
    "compute_deviance",
    "compute_ped",
    "diagnose",
    "gelman_rubin",
    "generate_dataset",
    "hrs_shaped_scenario",
    "posterior_membership",
    "relabel",
    "run_chain",
    "run_chains",
    "sweep",
    "two_outcome_scenario",
    "validate_dataset",
]
