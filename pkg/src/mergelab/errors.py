"""Exception hierarchy shared across the package."""


class MergelabError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MergelabError):
    """Operands have incompatible dimensions."""


class StructureError(MergelabError):
    """Parameter collections are not homologous (names/shapes/order differ)."""


class ConfigError(MergelabError):
    """Invalid configuration value or experiment description."""


class DataError(MergelabError):
    """Malformed dataset contents (labels out of range, bad CSV, ...)."""


class NumericError(MergelabError):
    """A numeric failure (NaN/Inf) was detected mid-pipeline."""


class CheckpointError(MergelabError):
    """Base class for checkpoint (de)serialization failures."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class TruncatedCheckpointError(CheckpointError):
    """Checkpoint payload ends before the declared contents."""
