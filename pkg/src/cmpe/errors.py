"""Exception types raised across the package."""


class CmpeError(Exception):
    """Base class for all package errors."""


class DimensionError(CmpeError, ValueError):
    """An array does not have the shape an operation expects."""


class DomainError(CmpeError, ValueError):
    """An argument lies outside the domain of an operation."""


class CacheMismatchError(CmpeError, RuntimeError):
    """A backward pass was given a cache from a different or stale forward pass."""


class TrainingDivergenceError(CmpeError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, **diagnostics):
        self.diagnostics = diagnostics
        if diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)


class ScheduleError(CmpeError, ValueError):
    """A noise schedule has no probability mass on its grid."""


class BudgetExceededError(CmpeError, RuntimeError):
    """Rejection sampling accepted too few proposals to finish within budget."""


class DegenerateMapError(CmpeError, ArithmeticError):
    """A consistency map has a (numerically) singular Jacobian."""


class ConfigError(CmpeError, ValueError):
    """An experiment configuration is malformed."""
