"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent option combination."""


class DataFormatError(ValueError):
    """Malformed dataset file; the message names the offending byte offset."""


class NumericError(ArithmeticError):
    """Non-finite value produced where finite math was required."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or does not match the expected model."""


class InternalConsistencyError(RuntimeError):
    """A cross-operation contract was violated (e.g. partition vs. swap)."""
