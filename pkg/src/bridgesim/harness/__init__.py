"""Command-line experiments: configuration, runners and file output."""
from .config import ConfigError, ExperimentConfig, load_config
from .runners import run_compare, run_figure, run_mh, run_simulate, run_tables

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "run_compare",
    "run_figure",
    "run_mh",
    "run_simulate",
    "run_tables",
]
