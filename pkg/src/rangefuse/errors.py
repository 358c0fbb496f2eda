"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so every failure a user can trigger
should surface as one of them.
"""


class RangeFuseError(Exception):
    """Base class for all package errors."""


class DimensionError(RangeFuseError, ValueError):
    """Tensor shapes or extents are incompatible with an operation."""


class ConfigError(RangeFuseError, ValueError):
    """A configuration value violates its contract."""


class DataError(RangeFuseError, ValueError):
    """Input data is empty, degenerate, or out of range."""


class FormatError(RangeFuseError, ValueError):
    """A file on disk does not follow its binary or text layout."""


class NumericalError(RangeFuseError, ArithmeticError):
    """A computation produced non-finite values."""
