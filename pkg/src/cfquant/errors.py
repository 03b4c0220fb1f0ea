"""Exception types shared across the pipeline."""


class CfquantError(Exception):
    """Base class for all package errors."""


class ConfigError(CfquantError):
    """Invalid or unknown configuration entry."""


class ShapeMismatch(CfquantError):
    """Operands have incompatible dimensions."""


class ConstantVolume(CfquantError):
    """Volume has zero standard deviation where variation is required."""


class ConstantReference(CfquantError):
    """Histogram-matching reference is constant."""


class ConstantInput(CfquantError):
    """Correlation input is constant."""


class DegenerateRange(CfquantError):
    """Quantile range collapsed to a single value."""


class MissingStats(CfquantError):
    """Normalization statistics required but absent."""


class TooManyRegions(CfquantError):
    """Requested parcellation leaves a region below the minimum size."""


class EmptyClass(CfquantError):
    """A class label is absent from a training split."""


class EmptyPairs(CfquantError):
    """No volume pairs supplied."""


class EmptyGroup(CfquantError):
    """A required sample group is empty."""


class EmptyStratum(CfquantError):
    """An age stratum contains no samples."""


class NotPretrained(CfquantError):
    """Generator training requires a pre-trained classifier checkpoint."""


class SingleClass(CfquantError):
    """AUC needs both classes present."""


class AllTies(CfquantError):
    """Signed-rank test received no non-zero differences."""


class ClassTooSmall(CfquantError):
    """Stratified folding impossible with the given class counts."""


class LeakageGuard(CfquantError):
    """A training-side artifact depends on test-fold subjects."""


class MissingStage(CfquantError):
    """A pipeline stage's required inputs are not present."""


class FileFormatError(CfquantError):
    """Artifact file is corrupt or has the wrong magic."""
