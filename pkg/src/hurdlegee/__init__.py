"""Two-part (presence + severity) GEE models for zero-inflated, clustered,
longitudinal ordinal scores."""

__version__ = "0.1.0"

from .combined import CombinedFit, estimate_gamma, fit_combined
from .correlation import CODES, CorrelationStructure
from .data import Dataset, ingest_csv, presence_view, severity_view
from .errors import ConvergenceWarning, EstimationWarning, HurdleGEEError
from .inference import (
    Analysis,
    BootstrapResult,
    CoefficientTrack,
    ModelSpec,
    ShrinkageResult,
    analyze,
    cluster_bootstrap,
    fit_spec,
    jackknife_se,
    james_stein,
    significance_flags,
)
from .meanmodel import PresenceParams, SeverityParams
from .report import CoefficientTable, TableRow, build_tables
from .simulation import TimeTruth, TruthSpec, generate_dataset
from .solver import FitResult, FitSettings, fit_presence, fit_severity

__all__ = [
    "Analysis", "BootstrapResult", "CODES", "CoefficientTable", "CoefficientTrack", "CombinedFit",
    "ConvergenceWarning", "CorrelationStructure", "Dataset", "EstimationWarning", "FitResult",
    "FitSettings", "HurdleGEEError", "ModelSpec", "PresenceParams", "SeverityParams", "ShrinkageResult",
    "TableRow", "TimeTruth", "TruthSpec", "analyze", "build_tables", "cluster_bootstrap", "estimate_gamma",
    "fit_combined", "fit_presence", "fit_severity", "fit_spec", "generate_dataset", "ingest_csv",
    "jackknife_se", "james_stein", "presence_view", "severity_view", "significance_flags",
]
