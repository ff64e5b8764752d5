from typing import Optional


class AccelflowError(Exception):
    """Base class for all errors raised by accelflow."""


class UsageError(AccelflowError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class DomainError(AccelflowError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class NumericalError(AccelflowError, ArithmeticError):
    """A computation produced a singular or non-finite intermediate."""


class DivergenceError(NumericalError):
    """The particle state became non-finite during a run."""

    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message)
        self.iteration = iteration


class CoverageError(NumericalError):
    """A quadrature grid does not carry enough of the estimated mass."""


class CapabilityError(AccelflowError, NotImplementedError):
    """The requested (target, quantity) pair is not supported."""


class ConfigError(AccelflowError, ValueError):
    """Invalid experiment configuration; `key_path` names the offending key."""

    def __init__(self, message: str, key_path: str = ""):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path
