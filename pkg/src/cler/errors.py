class ConfigError(ValueError):
    """Invalid experiment, dataset or method configuration."""


class DataError(ValueError):
    """Dataset content does not satisfy the stream contract."""


class NoReplayAvailable(LookupError):
    """Raised when sampling from a replay buffer that holds nothing yet."""
