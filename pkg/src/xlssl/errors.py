"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration, plan, or argument values."""


class DataError(Exception):
    """Malformed or inconsistent input data (manifests, audio, caches)."""


class NumericError(ArithmeticError):
    """Non-finite values encountered where finite arithmetic is required."""
