"""Exception hierarchy shared across the pipeline.

Three tiers map onto CLI exit codes: ConfigError (1), DataError (2),
and everything else under EcgScreenError (3).
"""


class EcgScreenError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EcgScreenError):
    """Invalid configuration or usage."""


class DataError(EcgScreenError):
    """Input data failed validation."""


# --- ICD / vocabulary ---------------------------------------------------

class MalformedCode(DataError):
    """String does not satisfy the ICD-10 syntactic rule."""


class DanglingLink(DataError):
    """ECG-episode link references an unknown episode."""


# --- cohort -------------------------------------------------------------

class EmptyCohort(DataError):
    """No patients left to split."""


class UnlinkedRow(DataError):
    """Label-matrix row has no episode link."""


# --- signal container ---------------------------------------------------

class InsufficientData(DataError):
    """Too few traces to fit normalization statistics."""


class BadMagic(DataError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(DataError):
    """File format version is not supported."""


class TruncatedFile(DataError):
    """File ends before the promised payload."""


class NonFiniteSample(DataError):
    """Waveform contains NaN or infinite samples."""


# --- autodiff engine ----------------------------------------------------

class ShapeMismatch(EcgScreenError):
    """Operands have incompatible shapes."""


class InvalidRate(ConfigError):
    """Dropout rate outside [0, 1)."""


class DegenerateBatch(EcgScreenError):
    """Batch too small to compute batch statistics."""


class GraphCycle(EcgScreenError):
    """Recorded operation graph is not a valid forward order."""


class NonScalarLoss(EcgScreenError):
    """Backward was started from a non-scalar tensor."""


class NonFiniteValue(EcgScreenError):
    """An operation produced NaN or infinite values."""


# --- model --------------------------------------------------------------

class ConfigInvalid(ConfigError):
    """Model configuration violates a structural constraint."""


class EmptyTrainingSet(DataError):
    """No rows to train on."""


class LabelWidthMismatch(DataError):
    """Label matrix width differs from the model's output width."""


class TensorShapeMismatch(DataError):
    """Checkpoint tensor shape differs from the model's parameter shape."""


# --- metrics / screen ---------------------------------------------------

class DegenerateLabels(DataError):
    """All labels positive or all negative; rank metrics undefined."""


class UnknownLabel(DataError):
    """Metrics table is missing a selected label."""


class MissingArtifact(DataError):
    """A required pipeline artifact does not exist."""


class DigestMismatch(DataError):
    """Artifacts produced under different configurations were mixed."""
