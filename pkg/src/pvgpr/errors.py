"""Exception hierarchy shared by every pvgpr module."""
from __future__ import annotations


class PvGprError(Exception):
    """Base class for all errors raised by pvgpr."""


class SchemaMismatchError(PvGprError):
    """A mapped CSV column is absent from the header."""


class EmptyDatasetError(PvGprError):
    """No valid rows were left after parsing."""


class AllRowsDroppedError(PvGprError):
    """Cleaning removed every record."""


class InsufficientDaysError(PvGprError):
    """Not enough calendar days to carve out the requested hold-out."""


class TooFewPointsError(PvGprError):
    """An operation received fewer samples than it needs."""


class DegenerateDataError(PvGprError):
    """Points are too uniform to split into the requested clusters."""


class ZeroVarianceError(PvGprError):
    """A correlation input is constant."""


class LengthMismatchError(PvGprError, ValueError):
    """Paired vectors have different lengths."""


class EmptyInputError(PvGprError, ValueError):
    """A metric received zero samples."""


class EmptySelectionError(PvGprError):
    """Feature selection policy kept no features."""


class DimensionMismatchError(PvGprError, ValueError):
    """Input dimensionality disagrees with the model."""


class SingularKernelError(PvGprError):
    """Cholesky factorisation failed even after jitter escalation."""


class ConstantColumnError(PvGprError):
    """A training feature column has zero variance."""


class OptimizerFailureError(PvGprError):
    """No optimizer start produced a finite likelihood."""


class UnsupportedLevelError(PvGprError, ValueError):
    """Confidence level outside the supported table."""


class ArtifactCorruptError(PvGprError):
    """A persisted model artifact failed its integrity checks."""


class StageError(PvGprError):
    """Wraps a failure inside the pipeline with the stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
