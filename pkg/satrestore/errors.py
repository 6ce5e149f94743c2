"""Exception types raised by satrestore.

The hierarchy derives from the built-in exceptions, so callers can keep catching `ValueError` or `ArithmeticError`.
The command line interface maps each family to a stable exit code.
"""

from __future__ import annotations

__all__ = (
    "SatRestoreError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "ManifestError",
    "NumericalError",
)


class SatRestoreError(Exception):
    """Base class for all satrestore errors."""


class ConfigError(SatRestoreError, ValueError):
    """Invalid configuration or parameter value."""


class DataError(SatRestoreError, ValueError):
    """Invalid, missing or inconsistent input data."""


class DimensionError(DataError):
    """Array or kernel dimensions are incompatible."""


class ManifestError(DataError):
    """A weights manifest or weight blob is missing, corrupt or describes an unsupported network."""


class NumericalError(SatRestoreError, ArithmeticError):
    """A computation produced non-finite values or failed to make progress."""
