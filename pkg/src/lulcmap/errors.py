"""Exception types shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numerical 4),
so library code should raise the most specific one that applies.
"""


class LulcmapError(Exception):
    """Base class for all package errors."""


class ConfigError(LulcmapError):
    """Invalid or inconsistent configuration (bad field, unknown key, mismatch)."""


class DataError(LulcmapError):
    """Problem with input data: missing files, undecodable images, bad layout."""


class NumericalError(LulcmapError):
    """Numerical failure: divergence, non-finite values, failed gradient check."""


class ShapeError(LulcmapError, ValueError):
    """Tensor shape mismatch; the message names the offending shapes."""
