# Experiment pipeline
"""
Configuration, training loops, theory checks and the command-line harness.

Usage:
    from src.pipeline import MethodConfig, run, load_config

    config = load_config("configs/quadratic.ini")
"""

from .optimizer import (
    BaseOptimizer,
    FilterParams,
    KalmanParams,
    MethodConfig,
    TrainingResult,
    run,
    step_disk,
    step_dpsgd,
    step_fftkf,
)
from .config import ConfigError, ExperimentConfig, build_problem, load_config, parse_config

__all__ = [
    "BaseOptimizer",
    "FilterParams",
    "KalmanParams",
    "MethodConfig",
    "TrainingResult",
    "run",
    "step_disk",
    "step_dpsgd",
    "step_fftkf",
    "ConfigError",
    "ExperimentConfig",
    "build_problem",
    "load_config",
    "parse_config",
]
