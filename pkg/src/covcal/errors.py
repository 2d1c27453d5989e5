"""Exception hierarchy shared by all covcal modules.

Two branches matter for the command-line front end: ``DataError`` maps to
exit code 2 (bad inputs, schemas, usage) and ``NumericalError`` maps to
exit code 3 (singular matrices, diverged solvers).
"""


class CovcalError(Exception):
    """Base class for all covcal errors."""


class DataError(CovcalError):
    """Invalid or insufficient input data."""


class NumericalError(CovcalError):
    """Numerical failure during computation."""


class InvalidInput(DataError):
    """Arguments violate a documented precondition."""


class EmptyInput(DataError):
    """An operation received no data."""


class InsufficientRuns(DataError):
    """Too few Monte-Carlo runs for a sample covariance."""


class InsufficientData(DataError):
    """Too few samples for the requested operation."""


class InvalidWindow(DataError):
    """Window size is even, too small, or exceeds the series length."""


class DegenerateAlignment(DataError):
    """Point sets are too degenerate to define a rigid alignment."""


class DegenerateFit(DataError):
    """Training data admits no well-defined fit (e.g. all-zero inputs)."""


class UndefinedBaseline(DataError):
    """Percent-decrease baseline has zero dynamic range."""


class SchemaMismatch(DataError):
    """File content does not match its declared schema."""


class SingularCovariance(NumericalError):
    """Covariance matrix is singular where positive definiteness is required."""


class SingularInnovation(NumericalError):
    """Innovation covariance C P C^T + Q is not invertible."""


class SingularMeasurement(NumericalError):
    """Measurement model undefined at the current state (e.g. zero range)."""


class DivergedFilter(NumericalError):
    """Filter state or covariance became non-finite or unbounded."""


class OptimizerStalled(NumericalError):
    """Line search failed to find any decreasing step."""


class TrainingDiverged(NumericalError):
    """Network training produced a non-finite loss."""
