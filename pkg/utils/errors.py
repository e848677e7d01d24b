"""
Exception hierarchy shared by every package of the lab.

The CLI maps each family to its own exit code (see ``main.EXIT_CODES``).
"""

from typing import Any, Dict, Optional


class LabError(Exception):
    """Base class for all errors raised by the lab."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details = details or {}


class ConfigError(LabError):
    """Invalid, unknown or mutually impossible configuration values."""
    pass


class ShapeError(LabError, ValueError):
    """Operands whose dimensions do not chain."""
    pass


class NumericalError(LabError):
    """Non-convergence, non-finite values or divergence during training."""
    pass


class DegenerateInputError(NumericalError):
    """An operation is undefined for the given input (zero vector, untrained adapter, ...)."""
    pass


class PipelineTargetError(LabError):
    """A pipeline stage finished without reaching its target."""
    pass


class CheckpointError(LabError):
    """Base class for checkpoint container errors."""
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ReportError(LabError):
    """Report records could not be emitted."""
    pass
