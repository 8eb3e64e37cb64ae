"""
Exception hierarchy for the intermittent-demand GP package
"""


class IntermittentGPError(Exception):
    """Base class for all package errors"""


class ParameterError(IntermittentGPError, ValueError):
    """Invalid distribution, model or configuration parameters"""


class NumericRangeError(IntermittentGPError, OverflowError):
    """A quantity left the representable floating point range"""


class NotPositiveDefiniteError(IntermittentGPError):
    """Cholesky factorization failed even after jitter escalation"""


class TrainingFailedError(IntermittentGPError):
    """Optimization produced no usable model after all restarts"""


class DataError(IntermittentGPError):
    """Malformed or empty input data"""

    def __init__(self, message: str, line: int = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(IntermittentGPError):
    """Unknown dataset/model names or unreadable configuration"""
