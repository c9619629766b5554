"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class CasgrowError(Exception):
    """Base class for all package errors."""


class ConfigError(CasgrowError):
    """Invalid configuration value or combination."""


class DataError(CasgrowError):
    """Malformed corpus file or cascade that violates its invariants."""


class NumericalError(CasgrowError):
    """Numerical failure: divergence, singular system, failed gradient check."""
