"""Exception hierarchy shared by every module."""


class DistillError(Exception):
    """Base class for all errors raised by the package."""


class UsageError(DistillError, ValueError):
    """An operation was called in the wrong order or with unusable input."""


class DegenerateTarget(DistillError, ValueError):
    """All probability mass sits on the target class; non-target terms are undefined."""

    def __init__(self, message="target probability within 1e-12 of 1", rows=None):
        super().__init__(message)
        self.rows = rows


class FormatError(DistillError, ValueError):
    """A file does not follow the expected binary or text layout."""


class ConfigError(DistillError, ValueError):
    """An experiment configuration is missing fields or holds invalid values."""


class NumericalError(DistillError, ArithmeticError):
    """A loss or gradient became non-finite, or a gradient check failed."""
