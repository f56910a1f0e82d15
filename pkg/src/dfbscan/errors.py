"""Exception hierarchy shared across the scanner.

Plain I/O failures (unreadable paths, permissions) are left to the builtin
OSError; everything domain-specific derives from ScanError so callers can
catch one base class at tool boundaries.
"""


class ScanError(Exception):
    """Base class for all scanner-specific errors."""


class MalformedFileError(ScanError):
    """File is not a valid final-layer container (bad magic, truncation, bad JSON)."""


class DimensionError(ScanError):
    """Declared dimensions are invalid or inconsistent with the payload."""


class NonFiniteError(ScanError):
    """A weight or bias entry is NaN or infinite."""

    def __init__(self, message: str, row: int | None = None, col: int | None = None):
        super().__init__(message)
        self.row = row
        self.col = col


class UnknownIndicatorError(ScanError):
    """An indicator id falls outside the 62-entry catalog."""


class EmptySelectionError(ScanError):
    """An indicator selection is empty."""


class LengthMismatchError(ScanError):
    """Two vectors that must share a length do not."""


class ClassCountMismatchError(ScanError):
    """Models or profiles disagree on the number of classes."""


class BatchTooSmallError(ScanError):
    """Reference-free scanning needs at least three models."""


class EmptyCleanSetError(ScanError):
    """A clean reference requires at least one clean model."""


class DegenerateConfigError(ScanError):
    """Calibration requires both clean and backdoored models."""


class NoBackdoorModelsError(ScanError):
    """Accuracy ranking requires at least one backdoored model."""


class DegenerateLabelsError(ScanError):
    """A feature table carries only one label class."""


class TooFewCleansError(ScanError):
    """Isolation-forest ranking needs a minimum number of clean rows."""


class InvalidAttackError(ScanError):
    """Attack kind is not applicable to the requested operation."""
