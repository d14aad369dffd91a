"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid or inconsistent configuration (file, key, or value)."""


class CheckpointError(Exception):
    """Malformed, truncated, or incompatible checkpoint file."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
