"""
Error hierarchy for spatial_dr.

This module provides the exception classes raised across the package and the
mapping from each failure family to the command-line exit code.
"""

from typing import Any

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class SpatialDrError(Exception):
    """Base class for all errors raised by spatial_dr.

    Every error carries an operation context and an optional list of detail
    strings (one per offending item), so callers can report all problems at
    once instead of the first one only.
    """

    exit_code = 1

    def __init__(
        self,
        message: str,
        errors: list[str] | None = None,
        **context: Any,
    ) -> None:
        super().__init__(message)
        self.errors = errors or []
        self.context = context

    def summary(self) -> str:
        """Generate a one-line summary of the error for logging.

        Returns:
            Formatted error summary string
        """
        operation = self.context.get("operation", "unknown")
        text = f"Error in {operation}: {type(self).__name__}: {self}"
        if self.errors:
            text += " [" + "; ".join(self.errors) + "]"
        return text


class ConfigurationError(SpatialDrError):
    """Raised when configuration, column names or flags are invalid."""

    exit_code = EXIT_CONFIG


class ParameterError(ConfigurationError):
    """Raised when a numeric parameter is out of its valid range."""


class PipelineValidationError(ConfigurationError):
    """Raised when the stage graph has missing or circular dependencies."""


class DataError(SpatialDrError):
    """Raised when input data cannot be read or violates an invariant."""

    exit_code = EXIT_DATA


class ParseError(DataError):
    """Raised when a cell in a numeric column cannot be parsed."""


class InsufficientDataError(DataError):
    """Raised when too few complete rows remain for the analysis."""


class DegenerateDataError(DataError):
    """Raised when a vector that must vary is constant."""


class NumericalError(SpatialDrError):
    """Raised when a numerical routine fails."""

    exit_code = EXIT_NUMERICAL


class ConvergenceError(NumericalError):
    """Raised when coordinate descent exhausts its sweep budget."""

    def __init__(self, message: str, duality_gap: float, **context: Any) -> None:
        super().__init__(message, duality_gap=duality_gap, **context)
        self.duality_gap = duality_gap


class SingularDenominatorError(NumericalError):
    """Raised when the doubly robust denominator is numerically zero."""


class ExtremeWeightError(NumericalError):
    """Raised when a conditional treatment density underflows."""


class EigensolverError(NumericalError):
    """Raised when an eigenpair fails its residual check."""


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the documented command-line exit code.

    Args:
        error: The exception that ended the run

    Returns:
        2 for configuration errors, 3 for data errors, 4 for numerical
        failures, 1 for anything else
    """
    if isinstance(error, SpatialDrError):
        return error.exit_code
    return 1
