"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError and
CheckpointError -> 3, anything else -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration key, value, or combination."""


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


class CheckpointError(ValueError):
    """Unreadable, corrupt, or incompatible checkpoint file."""
