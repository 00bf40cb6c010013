"""Exception hierarchy shared across the package.

CLI exit codes map onto these: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class GestureVidError(Exception):
    """Base class for all package errors."""


class ConfigError(GestureVidError):
    """Invalid configuration or invalid arguments to a builder."""


class DataError(GestureVidError):
    """Malformed, inconsistent, or missing data."""


class ShapeError(DataError):
    """Array shapes incompatible with an operation's contract."""


class NumericError(GestureVidError):
    """A computation produced NaN/Inf or was fed non-finite values."""
