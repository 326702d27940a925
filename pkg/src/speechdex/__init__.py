"""Speech-text dual-encoder retrieval at desk scale."""

__version__ = "0.1.0"

from speechdex.errors import (
    CodebookError,
    ConfigError,
    DataError,
    IntegrityError,
    ShapeError,
    SpeechdexError,
    TrainingAborted,
    VocabularyError,
)

__all__ = [
    "CodebookError",
    "ConfigError",
    "DataError",
    "IntegrityError",
    "ShapeError",
    "SpeechdexError",
    "TrainingAborted",
    "VocabularyError",
    "__version__",
]
