"""Exception hierarchy shared across the package."""


class F2FError(Exception):
    """Base class for all package errors."""


class ShapeError(F2FError, ValueError):
    """Tensor shapes or channel counts don't agree."""


class ConfigError(F2FError, ValueError):
    """Malformed or inconsistent configuration."""


class DataError(F2FError):
    """Missing or unusable input data."""


class CacheFormatError(DataError):
    """Feature cache has the wrong magic bytes or version."""


class CacheTruncatedError(DataError):
    """Feature cache payload ends before its declared size."""


class DuplicateKeyError(DataError):
    """A (clip, frame) key was written twice."""


class MissingRecordError(DataError, KeyError):
    """Requested (clip, frame) key is not present."""


class CheckpointError(F2FError):
    """Checkpoint file is malformed or doesn't match the model."""
