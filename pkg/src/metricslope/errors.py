"""Exception hierarchy shared by all modules."""


class MetricSlopeError(Exception):
    """Base class for errors raised by this package."""


class InvalidArgumentError(MetricSlopeError, ValueError):
    pass


class DomainError(MetricSlopeError, ValueError):
    pass


class UnsupportedOperationError(MetricSlopeError, NotImplementedError):
    pass


class InsufficientDataError(MetricSlopeError, ValueError):
    pass


class PreconditionError(MetricSlopeError, ValueError):
    pass


class ContractViolationError(MetricSlopeError, RuntimeError):
    pass


class ConvergenceError(MetricSlopeError, RuntimeError):
    """An iterative routine ran out of budget before reaching its tolerance.

    The best iterate found and its residual are kept on the exception so
    callers can decide whether the partial answer is usable.
    """

    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class InfeasibleModelError(ConvergenceError):
    """The moving-balls model region appears to be empty."""


class ConfigError(MetricSlopeError, ValueError):
    pass
