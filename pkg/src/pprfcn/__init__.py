"""Parallel pairwise R-FCN scoring for weakly supervised relation detection."""

from pprfcn.errors import (
    ConfigError,
    DimensionError,
    DomainError,
    FormatError,
    NumericError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "DomainError",
    "FormatError",
    "NumericError",
    "UsageError",
]
