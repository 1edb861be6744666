"""Exception hierarchy shared by the whole package."""


class MwtomoError(Exception):
    """Base class for all package errors."""


class ConfigError(MwtomoError, ValueError):
    """Invalid setup, phantom, option or experiment configuration."""


class SolverError(MwtomoError):
    """Direct forward solve failed (singular or numerically singular system)."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class UndefinedWeightError(MwtomoError, ZeroDivisionError):
    """The contrast-dependent weight is undefined (zero contrast)."""


class NumericalError(MwtomoError, ArithmeticError):
    """An iterative method broke down (non-PSD curvature, NaN, bad step)."""


class ParseError(MwtomoError, ValueError):
    """Malformed dataset file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
