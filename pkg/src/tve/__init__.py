"""Targeted estimation of the log causal risk ratio and of its EIF variance."""

__version__ = "0.1.0"

from .data import Dataset, DgdKind, DgdSpec, load_csv, resample_filtered, simulate, write_csv
from .errors import TveError
from .learners import LearnerSpec, NuisanceFit, fit_logistic, fit_nuisances
from .montecarlo import ScenarioConfig, psi_truth, run_scenario, sigma2_oracle, sigma2_quadrature, summarize
from .pipeline import EstimateReport, estimate
from .target_psi import PsiTarget, tmle_psi
from .variance import (
    FlowTrace,
    Termination,
    VarianceReport,
    confidence_interval,
    var_ic,
    var_iterative,
    var_onestep,
    var_ss,
)

__all__ = [
    "Dataset", "DgdKind", "DgdSpec", "EstimateReport", "FlowTrace", "LearnerSpec", "NuisanceFit",
    "PsiTarget", "ScenarioConfig", "Termination", "TveError", "VarianceReport", "confidence_interval",
    "estimate", "fit_logistic", "fit_nuisances", "load_csv", "psi_truth", "resample_filtered",
    "run_scenario", "sigma2_oracle", "sigma2_quadrature", "simulate", "summarize", "tmle_psi",
    "var_ic", "var_iterative", "var_onestep", "var_ss", "write_csv",
]
