"""Frequency-compensated dual-branch forecasting of daily sea-ice concentration."""

from .errors import (
    ConfigError,
    DimensionError,
    FcnetError,
    FormatError,
    MetricError,
    NumericError,
    UsageError,
)
from .tensor import Tensor, Tape, active_tape, no_grad, reset_tape

__all__ = [
    "ConfigError",
    "DimensionError",
    "FcnetError",
    "FormatError",
    "MetricError",
    "NumericError",
    "UsageError",
    "Tensor",
    "Tape",
    "active_tape",
    "no_grad",
    "reset_tape",
]

__version__ = "0.1.0"
