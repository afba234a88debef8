"""Synthetic datasets and the experiment scenarios built on the Riccati engine."""

from .config import SCENARIOS, ExperimentConfig, StepPolicy, resolve_config
from .metrics import PredictionGrid, max_relative_discrepancy, prediction_grid, relative_l2_error
from .runner import run_scenario
from .scenarios import (
    run_active_learning,
    run_bigdata_stream,
    run_continual_learning,
    run_helmholtz_decomposition,
    run_hyperparameter_tuning,
    run_outlier_removal,
    verify_active_log,
)

__all__ = [
    "SCENARIOS",
    "ExperimentConfig",
    "StepPolicy",
    "resolve_config",
    "PredictionGrid",
    "max_relative_discrepancy",
    "prediction_grid",
    "relative_l2_error",
    "run_scenario",
    "run_active_learning",
    "run_bigdata_stream",
    "run_continual_learning",
    "run_helmholtz_decomposition",
    "run_hyperparameter_tuning",
    "run_outlier_removal",
    "verify_active_log",
]
