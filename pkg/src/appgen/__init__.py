"""Mobility-conditioned synthetic app-usage generation and evaluation."""

__version__ = "0.1.0"

from .errors import (
    AppGenError,
    CheckpointError,
    ConfigError,
    DataFormatError,
    TrainingError,
    ValidationError,
)

__all__ = [
    "AppGenError",
    "CheckpointError",
    "ConfigError",
    "DataFormatError",
    "TrainingError",
    "ValidationError",
    "__version__",
]
