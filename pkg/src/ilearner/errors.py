"""Exception hierarchy shared by all modules."""


class ILearnerError(Exception):
    """Base class for errors raised by this package."""


class DomainError(ILearnerError, ValueError):
    """Argument outside the domain of an operation (bad shape, range, value)."""


class DegenerateCovariateError(DomainError):
    """A covariate column carries no variation."""

    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"covariate column {column!r} is constant")


class DegenerateTreatmentError(DomainError):
    """Treatment vector has a single class."""


class InsufficientSupportError(DomainError):
    """Too few treated observations to fit a treated-arm model."""


class ConfigError(ILearnerError, ValueError):
    """Invalid or inconsistent configuration."""


class ConvergenceError(ILearnerError, RuntimeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
