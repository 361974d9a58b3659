"""Exception types shared across the toolkit.

Each maps onto one CLI exit code (see ``knnmmd.cli``).
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed, missing or inconsistent data."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or activation."""
