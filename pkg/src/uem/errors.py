"""Exception taxonomy for the engine.

Two families so the CLI can map failures onto exit codes: ``DataError``
(exit 3) for anything wrong with files, formats or datasets, and
``NumericError`` (exit 4) for anything wrong with values, gradients or
training. ``ConfigError`` is a usage problem (exit 2).
"""


class UemError(Exception):
    """Base class for all package errors."""


class ConfigError(UemError):
    """Invalid or unknown configuration key/value (usage error)."""


class DataError(UemError):
    """Problem with input files, formats or dataset structure."""


class NumericError(UemError):
    """Problem with numeric values, gradients or training."""


# --- numeric family ---------------------------------------------------------

class ShapeError(NumericError):
    """Operands have incompatible shapes."""


class NumericDomainError(NumericError):
    """A value left the domain an operation is defined on (log of a
    nonpositive number, exp overflow, nonpositive contrastive ratio)."""


class NoNegativesError(NumericError):
    """A batch is too small to supply negative samples."""


class TrainingDivergedError(NumericError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, step: int, message: str = ""):
        self.epoch = epoch
        self.step = step
        super().__init__(
            message or f"training diverged at epoch {epoch}, step {step} (non-finite loss)"
        )


# --- data family ------------------------------------------------------------

class DegenerateVectorError(DataError):
    """A vector with (near-)zero norm reached a cosine; indicates corrupt
    ingestion rather than a legitimate numeric state."""


class IngestionError(DataError):
    """Malformed record or value encountered while reading an input file."""


class SequenceLengthError(DataError):
    """A token sequence exceeds the configured maximum length."""


class ParameterError(DataError):
    """A data-dependent parameter is out of range (e.g. more clusters than
    frames)."""


class CoverageMismatchError(DataError):
    """Two segmentations of the same video do not cover the same frames."""


class EmptyCorpusError(DataError):
    """Ranking or evaluation was asked to run against an empty corpus."""


class InfeasibleSpecError(DataError):
    """A synthetic dataset spec cannot be satisfied."""


# --- binary feature format ---------------------------------------------------

class UemfFormatError(DataError):
    """Base class for feature-file framing errors."""


class BadMagicError(UemfFormatError):
    pass


class UnsupportedVersionError(UemfFormatError):
    pass


class UnsupportedDtypeError(UemfFormatError):
    pass


class TruncatedPayloadError(UemfFormatError):
    pass


class NonFiniteValueError(UemfFormatError):
    """Payload holds NaN or Inf (on load), or the caller tried to write one."""


# --- manifests and checkpoints ------------------------------------------------

class ManifestError(DataError):
    """Base class for manifest/split problems."""


class DuplicateIdError(ManifestError):
    pass


class DanglingReferenceError(ManifestError):
    pass


class MissingFeatureFileError(ManifestError):
    pass


class DimensionMismatchError(ManifestError):
    pass


class CheckpointFormatError(DataError):
    """Checkpoint file is not a well-formed parameter archive."""
