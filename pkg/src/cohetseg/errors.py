"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid generator or trainer configuration."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""
