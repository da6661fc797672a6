"""Federated radio map learning with budget-constrained adaptive upload noise."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .harness import run_comparison, run_scheme
from .privacy import SCHEMES, DefenseConfig

__all__ = [
    "SCHEMES",
    "ConfigError",
    "DefenseConfig",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "run_comparison",
    "run_scheme",
]
__version__ = "0.1.0"
