"""Exception types shared across the package.

The CLI maps these onto its exit-code taxonomy: ``ConfigError`` -> 2,
``DataError`` -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration value or file."""


class DataError(ValueError):
    """Malformed, inconsistent or missing input data."""
