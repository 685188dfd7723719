"""Exception hierarchy shared across the package.

``ValidationError`` covers caller mistakes (bad arguments, malformed
configs/files) and maps to CLI exit code 2; ``NumericalError`` covers
runtime numerical breakdowns and maps to exit code 3.
"""

from __future__ import annotations


class GeoquadError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(GeoquadError):
    """Invalid user input: arguments, configuration, or file contents."""


class ParseError(ValidationError):
    """Malformed record in a data file; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateInputError(ValidationError):
    """An observation coincides with an existing one within tolerance."""


class NumericalError(GeoquadError):
    """Numerical procedure broke down (factorization, non-finite values)."""


class SolverFailure(NumericalError):
    """Initial-value geodesic integration failed.

    Carries whatever partial trajectory the solver produced so callers can
    log or inspect it.
    """

    def __init__(self, message: str, partial=None):
        self.partial = partial
        super().__init__(message)


class GeodesicFailure(NumericalError):
    """Boundary-value geodesic problem could not be solved."""


class UnreliableEstimateError(NumericalError):
    """Too many failed samples for a trustworthy Monte Carlo estimate."""
