"""Exception hierarchy shared by every module.

All domain failures derive from :class:`MomeError`; the CLI maps these to
exit code 1.
"""


class MomeError(Exception):
    """Base class for domain errors."""


class DimensionError(MomeError, ValueError):
    pass


class ConfigError(MomeError, ValueError):
    pass


class InsufficientDataError(MomeError, ValueError):
    pass


class EmptyContextError(MomeError, ValueError):
    pass


class EvaluationError(MomeError, ArithmeticError):
    pass


class FormatError(MomeError, ValueError):
    pass


class NotFoundError(MomeError, KeyError):
    pass


class UndefinedReturnError(MomeError, ZeroDivisionError):
    pass


class TrainingAbort(MomeError, RuntimeError):
    """Raised when a loss becomes non-finite; carries step and batch id."""

    def __init__(self, message, step=None, batch_id=None):
        super().__init__(message)
        self.step = step
        self.batch_id = batch_id


class VerificationError(MomeError, AssertionError):
    pass
