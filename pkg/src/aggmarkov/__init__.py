"""EM estimation of time-inhomogeneous aggregate Markov models with the reset property."""

from .data import MacroPath, SojournRecord, SufficientStats, extract_sojourns, read_paths, write_paths
from .em import EMConfig, em_fit, estep_sojourn, estep_total, general_expected_stats
from .model import Basis, MicroLayout, ResetModel, TimeGrid, load_model, macro_loglik, save_model
from .simulate import disability_preset, simulate_aggregate, simulate_semi_markov

__all__ = [
    "Basis", "EMConfig", "MacroPath", "MicroLayout", "ResetModel", "SojournRecord",
    "SufficientStats", "TimeGrid", "disability_preset", "em_fit", "estep_sojourn",
    "estep_total", "extract_sojourns", "general_expected_stats", "load_model",
    "macro_loglik", "read_paths", "save_model", "simulate_aggregate",
    "simulate_semi_markov", "write_paths",
]
