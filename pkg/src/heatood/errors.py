"""Exception types shared across the package."""


class HeatoodError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HeatoodError, ValueError):
    """Shapes, hyperparameters or config values are inconsistent."""


class InputError(HeatoodError, ValueError):
    """Data handed to an operation violates its preconditions."""


class UsageError(HeatoodError, RuntimeError):
    """An API was called in the wrong order or state."""


class FormatError(HeatoodError, ValueError):
    """A binary file does not match its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ClassLookupError(HeatoodError, LookupError):
    """No feature-bank entry carries the requested class."""
