"""Exception types shared across the package."""


class SpeechdexError(Exception):
    """Base class for all package errors."""


class ShapeError(SpeechdexError):
    """Tensor shapes incompatible with the requested operation."""


class VocabularyError(SpeechdexError):
    """Token id outside the valid vocabulary range."""


class RegistryError(SpeechdexError):
    """Language code missing from the registry."""


class CodebookError(SpeechdexError):
    """Codebook misuse: dimension mismatch or insufficient data."""


class DataError(SpeechdexError):
    """Bad manifest, frame file, or batch composition input."""


class ConfigError(SpeechdexError):
    """Invalid or inconsistent configuration."""


class IntegrityError(SpeechdexError):
    """Corrupt or mismatched on-disk artifact (checkpoint, frame file)."""


class TrainingAborted(SpeechdexError):
    """Training stopped on a non-finite loss or gradient."""
