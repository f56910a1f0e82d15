"""Checkpoint-to-DFBS extraction for the final-layer backdoor scanner."""

from dfbs_extractor.dfbs import write_dfbs
from dfbs_extractor.errors import (
    AmbiguousLayer,
    ExtractionError,
    MalformedCheckpoint,
    NoFinalLayerFound,
    UnsupportedDtype,
)
from dfbs_extractor.extract import (
    ExtractionRule,
    ExtractionSummary,
    dequantize,
    extract,
)

__version__ = "0.1.0"

__all__ = [
    "AmbiguousLayer",
    "ExtractionError",
    "ExtractionRule",
    "ExtractionSummary",
    "MalformedCheckpoint",
    "NoFinalLayerFound",
    "UnsupportedDtype",
    "dequantize",
    "extract",
    "write_dfbs",
    "__version__",
]
