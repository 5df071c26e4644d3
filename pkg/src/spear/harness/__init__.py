"""Command-line experiments around the attack: simulation, scoring and reports."""

from .config import ConfigError, ExperimentConfig, load_config
from .io import DataError, load_batch
from .metrics import TrialMetrics, evaluate, match_columns

__all__ = ["ConfigError", "DataError", "ExperimentConfig", "TrialMetrics", "evaluate",
           "load_batch", "load_config", "match_columns"]
