"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class MFReadoutError(Exception):
    """Base class for all package errors."""


class ConfigError(MFReadoutError, ValueError):
    """Invalid configuration or parameters."""


class DataError(MFReadoutError, ValueError):
    """Malformed, inconsistent, or missing data."""


class NumericalError(MFReadoutError, ArithmeticError):
    """A numerical procedure failed (divergence, non-finite values, ...)."""
