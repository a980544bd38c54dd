"""Exception hierarchy shared by all nngpr modules.

Each class carries the CLI exit code used when it escapes a command.
"""


class NNGPRError(Exception):
    exit_code = 1


class ConfigError(NNGPRError, ValueError):
    exit_code = 2


class FormatError(NNGPRError, ValueError):
    """Malformed file or header; ``field`` names the offending entry."""

    exit_code = 3

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DataError(NNGPRError, ValueError):
    """Invalid payload content (non-finite values, shape mismatch, ...)."""

    exit_code = 3

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateGridError(DataError):
    pass


class NumericalError(NNGPRError, ArithmeticError):
    exit_code = 4


class ConditioningError(NumericalError):
    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


class SingularFitError(NumericalError):
    pass


class OptimizationError(NumericalError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class CompatibilityError(NNGPRError, ValueError):
    """Snapshot or fit state built with a different member order or layout."""

    exit_code = 6


class PartialFailure(NNGPRError):
    exit_code = 5
