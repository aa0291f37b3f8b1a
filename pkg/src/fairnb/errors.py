"""Exception hierarchy shared across the package."""


class FairNBError(Exception):
    """Base class for all package errors."""


class ConfigError(FairNBError, ValueError):
    """Invalid configuration or argument values."""


class DomainError(FairNBError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class CohortParseError(FairNBError, ValueError):
    def __init__(self, row, column, message):
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column!r}: {message}")


class SizingError(FairNBError, ValueError):
    """Too few samples to form the requested partition."""


class UndefinedMetricError(FairNBError, ValueError):
    """A metric is undefined for the given data (e.g. an empty outcome class)."""


class CalibrationError(FairNBError, RuntimeError):
    """Calibration-curve fit failed to converge or is degenerate.

    Carries the last iterate and gradient norm when available.
    """

    def __init__(self, message, params=None, grad_norm=None):
        self.params = params
        self.grad_norm = grad_norm
        super().__init__(message)


class NonInvertibleError(FairNBError, ValueError):
    """The calibration curve has a nonpositive slope and cannot be inverted."""


class StratificationError(FairNBError, ValueError):
    """A bootstrap stratum is empty."""


class TrainingError(FairNBError, RuntimeError):
    """Training diverged or otherwise failed."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
