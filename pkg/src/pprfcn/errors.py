class DimensionError(ValueError):
    """Array shapes do not line up."""


class DomainError(ValueError):
    """Argument outside the domain an operation is defined on."""


class NumericError(ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed."""


class UsageError(ValueError):
    """An API was called with inconsistent arguments (e.g. swapped roles)."""


class FormatError(IOError):
    """A tensor or manifest file is malformed or missing."""

    def __init__(self, message, path=None):
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path


class ConfigError(ValueError):
    """A configuration cannot be satisfied."""
