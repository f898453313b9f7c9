"""Exception types raised across kvx2l.

Each error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class Kvx2lError(Exception):
    """Base class for all kvx2l errors."""

    exit_code = 1


class ConfigurationError(Kvx2lError):
    """Invalid configuration value, flag or config-file line."""

    exit_code = 2


class PreconditionError(Kvx2lError):
    """An operation was called with inputs violating its preconditions."""

    exit_code = 2


class DimensionError(Kvx2lError):
    """Tensor shapes do not match the engine configuration."""

    exit_code = 2


class IntegrityError(Kvx2lError):
    """Cache contents are missing, duplicated or fail checksum validation."""

    exit_code = 3


class CacheIOError(IntegrityError):
    """Reading or writing a cold-store record failed."""

    def __init__(self, message: str, chunk_index: Optional[int] = None, level: Optional[str] = None):
        self.chunk_index = chunk_index
        self.level = level
        if chunk_index is not None:
            message = f"{message} (chunk={chunk_index}, level={level})"
        super().__init__(message)


class ResourceError(Kvx2lError):
    """A run would exceed the configured memory budget."""

    exit_code = 4

    def __init__(self, message: str, budget_mb: Optional[float] = None):
        self.budget_mb = budget_mb
        if budget_mb is not None:
            message = f"{message} (memory budget: {budget_mb} MB)"
        super().__init__(message)
