"""Exception types raised across the package."""


class IDMVAEError(Exception):
    """Base class for all package errors."""


class InputError(IDMVAEError, ValueError):
    """Malformed arguments: wrong shapes, bad indices, misaligned batches."""


class NumericError(IDMVAEError, ArithmeticError):
    """Non-finite values or undefined numeric operations."""


class ConfigError(IDMVAEError, ValueError):
    """Invalid or inconsistent configuration."""


class AmbiguityError(IDMVAEError, ValueError):
    """A label cannot be decided because several candidates tie."""


class GateError(IDMVAEError, RuntimeError):
    """A reference classifier failed its accuracy gate."""


class TrainingAborted(IDMVAEError, RuntimeError):
    """Training stopped on a non-finite loss."""

    def __init__(self, message, component=None, step=None, checkpoint=None):
        super().__init__(message)
        self.component = component
        self.step = step
        self.checkpoint = checkpoint
