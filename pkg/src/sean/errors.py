"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class SeanError(Exception):
    """Base class for package errors."""


class ConfigError(SeanError):
    """Invalid configuration, incompatible options, or model/config mismatch."""


class DataError(SeanError):
    """Unreadable, truncated, or inconsistent data files and volumes."""


class NumericError(SeanError):
    """Non-finite values encountered during optimization or inference."""
