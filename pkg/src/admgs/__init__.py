"""Desk-scale differentiable gaussian splatting with appearance decomposition."""

from .errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractViolationError,
    DegenerateGeometryError,
    InvalidArgumentError,
    MissingTraversalError,
    TrainingDivergenceError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointChecksumError",
    "CheckpointError",
    "CheckpointTruncatedError",
    "CheckpointVersionError",
    "ContractViolationError",
    "DegenerateGeometryError",
    "InvalidArgumentError",
    "MissingTraversalError",
    "TrainingDivergenceError",
    "__version__",
]
