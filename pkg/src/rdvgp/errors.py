"""Exception hierarchy shared by every module."""


class RDVGPError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RDVGPError, ValueError):
    """Invalid configuration or argument combination."""


class NumericalError(RDVGPError, ArithmeticError):
    """A factorisation or other numerical step failed.

    ``diagnostics`` carries whatever the raising site knows about the
    failure (condition estimates, jitter tried, offending values).
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class EvaluationError(RDVGPError):
    """A black-box model evaluation failed."""

    def __init__(self, message, row=None, stderr=None):
        super().__init__(message)
        self.row = row
        self.stderr = stderr


class TrainingError(RDVGPError):
    """Every training restart aborted."""

    def __init__(self, message, restarts=()):
        super().__init__(message)
        self.restarts = list(restarts)


class MetricUndefinedError(RDVGPError, ValueError):
    """A validation metric is undefined for the supplied records."""
