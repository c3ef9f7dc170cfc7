"""Activation-bound backdoor defense for federated learning with synthetic-data fusion."""

from .config import ExperimentConfig, desk_config, load_config
from .engine import RunResult, run_experiment

__all__ = ["ExperimentConfig", "RunResult", "desk_config", "load_config", "run_experiment"]
__version__ = "0.1.0"
