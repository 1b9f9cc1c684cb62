"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: config/usage -> 2, data/format -> 3,
numeric failure -> 4.
"""


class FcnetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FcnetError):
    """Invalid configuration: bad hyperparameters, indivisible extents."""


class UsageError(FcnetError):
    """An API contract was violated by the caller."""


class DimensionError(FcnetError):
    """Tensor shapes do not line up for the requested operation."""


class FormatError(FcnetError):
    """A serialized file is malformed or inconsistent."""


class NumericError(FcnetError):
    """Non-finite values or a numerically invalid state."""


class MetricError(FcnetError):
    """A metric is undefined for the given data (e.g. zero variance)."""
