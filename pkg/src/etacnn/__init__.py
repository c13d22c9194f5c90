"""Masked-convolution autoregressive ETA estimation for a single bus route."""

from etacnn.errors import (
    CheckInvalidError,
    CheckpointError,
    ConfigurationError,
    DomainError,
    EmptyLossError,
    IngestionError,
    NumericError,
    SequencingError,
    TrainingDiverged,
)

__version__ = "0.1.0"

__all__ = [
    "CheckInvalidError",
    "CheckpointError",
    "ConfigurationError",
    "DomainError",
    "EmptyLossError",
    "IngestionError",
    "NumericError",
    "SequencingError",
    "TrainingDiverged",
]
