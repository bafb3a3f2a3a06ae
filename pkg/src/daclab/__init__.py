"""Simulation and verification lab for decentralized SGD with adaptive consensus."""

from .config import ExperimentConfig, parse_config, serialize
from .engine import RunConfig, RunResult, run
from .errors import (ConfigError, DaclabError, DivergedError, InsufficientDataError, InvalidArgumentError,
                     NumericalError, UnstableModeError)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DaclabError", "DivergedError", "ExperimentConfig", "InsufficientDataError",
    "InvalidArgumentError", "NumericalError", "RunConfig", "RunResult", "UnstableModeError",
    "parse_config", "run", "serialize",
]
