class ChunkKVError(Exception):
    """Base class for all library errors."""


class ConfigurationError(ChunkKVError):
    """Invalid configuration, arguments, or request shapes. CLI exit code 2."""


class DataFormatError(ChunkKVError):
    """Corrupt, truncated, or incompatible on-disk data. CLI exit code 3."""
