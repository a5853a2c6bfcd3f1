"""Finite element feedback stabilization of a coupled parabolic system."""

from coupled_stabilization.config import ExperimentConfig, ModelParams, load_config
from coupled_stabilization.exceptions import (
    ConfigurationError,
    NumericalError,
    StabilizationError,
)

__version__ = "0.1"

__all__ = [
    "ExperimentConfig",
    "ModelParams",
    "load_config",
    "ConfigurationError",
    "NumericalError",
    "StabilizationError",
]
