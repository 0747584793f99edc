"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class DataError(ValueError):
    """A data file or data array is malformed or inconsistent."""
