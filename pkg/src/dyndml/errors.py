"""Exception hierarchy.

Validation problems derive from ``ValueError`` so callers that only catch
the builtin still see them; estimation failures derive from
``EstimationError`` and map to CLI exit code 3.
"""


class DynDMLError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(DynDMLError, ValueError):
    """Bad input data or arguments."""


class SchemaError(ValidationError):
    """A required column is missing or unrecognised."""


class ShapeError(ValidationError):
    """Array or panel shape is inconsistent."""


class ParseError(ValidationError):
    """A cell could not be parsed as a finite number."""


class UnsupportedConfigError(ValidationError):
    """The requested configuration is outside what an operation supports."""


class EstimationError(DynDMLError):
    """The estimator could not produce a result."""


class IdentificationError(EstimationError):
    """A stage design matrix is singular (positivity fails empirically)."""

    def __init__(self, message, stage=None, min_eigenvalue=None):
        super().__init__(message)
        self.stage = stage
        self.min_eigenvalue = min_eigenvalue


class ConvergenceError(EstimationError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, last_change=None):
        super().__init__(message)
        self.last_change = last_change


class ConstraintError(EstimationError):
    """A norm constraint could not be satisfied."""


class NumericalError(EstimationError):
    """A quantity that must be non-negative or invertible is not."""
