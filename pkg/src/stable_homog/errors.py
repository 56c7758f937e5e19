"""Exception hierarchy shared by all modules."""


class StableHomogError(Exception):
    """Base class for every error raised by the package."""


class DomainError(StableHomogError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigurationError(StableHomogError, ValueError):
    """A configuration value is inconsistent or malformed."""


class ResourceError(StableHomogError, MemoryError):
    """The request would exceed a configured size limit."""


class AccuracyError(StableHomogError, ArithmeticError):
    """A quadrature could not reach the requested tolerance.

    The achieved error estimate is kept on ``estimate``.
    """

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class SolverError(StableHomogError, RuntimeError):
    """An iterative solver failed; ``report`` carries its last state."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
