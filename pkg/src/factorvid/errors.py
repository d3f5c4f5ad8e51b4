"""Exception types shared across the package."""


class FactorvidError(Exception):
    """Base class for all package errors."""


class ConfigError(FactorvidError):
    """Invalid or inconsistent configuration values."""


class DatasetIOError(FactorvidError):
    """Problems reading or writing dataset containers."""


class CorruptFileError(DatasetIOError):
    """Dataset container is truncated or fails structural checks."""


class VersionError(DatasetIOError):
    """Dataset or checkpoint container carries an unsupported version tag."""


class CheckpointError(FactorvidError):
    """Missing or incompatible checkpoint."""


class NonFiniteLossError(FactorvidError):
    """Training produced a NaN/Inf loss; carries the diagnostic dump path."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class EmptyForegroundError(FactorvidError):
    """Frame has no foreground pixels above threshold."""
