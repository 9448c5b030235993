"""Nonresponse adjustment for surveys with callback data under a shared odds ratio."""

from .data import Dataset, ObservationRecord, ParameterState, WorkingModelSpec, validate_dataset
from .estimators import EstimateReport, estimate_functional, estimate_mean, nonrespondent_mean
from .io import collapse_calls, load_csv, write_csv

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "collapse_calls",
    "EstimateReport",
    "ObservationRecord",
    "ParameterState",
    "WorkingModelSpec",
    "estimate_functional",
    "estimate_mean",
    "load_csv",
    "nonrespondent_mean",
    "validate_dataset",
    "write_csv",
    "__version__",
]
