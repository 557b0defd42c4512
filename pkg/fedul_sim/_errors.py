"""Exception hierarchy shared by every fedul_sim module."""


class FedulError(Exception):
    """Base class for all errors raised by fedul_sim."""


class ConfigError(FedulError, ValueError):
    """Invalid or inconsistent configuration value."""


class DimensionError(FedulError, ValueError):
    """Two objects that must share a dimension do not."""


class StoreFormatError(FedulError, ValueError):
    """A store or checkpoint file cannot be parsed (bad magic, bad header)."""


class StoreVersionError(StoreFormatError):
    """The file was written by an unsupported format version."""


class StoreTruncatedError(StoreFormatError):
    """The file ends before all declared records were read."""


class StoreInvariantError(FedulError, ValueError):
    """Store contents violate an invariant (round order, ids, probabilities)."""


class IdxFormatError(FedulError, ValueError):
    """An IDX image/label file is malformed."""


class IdxMagicError(IdxFormatError):
    """The IDX magic number is not the one expected for this file kind."""


class IdxCountMismatchError(IdxFormatError):
    """Image and label files declare different item counts."""


class IdxTruncatedError(IdxFormatError):
    """The IDX payload is shorter than its header declares."""


class DatasetError(FedulError, ValueError):
    """A dataset is empty or cannot satisfy the requested operation."""


class SamplingError(FedulError, ValueError):
    """Sampling probabilities cannot be computed or used."""


class UnlearningError(FedulError, ValueError):
    """An unlearning request is inconsistent with the model or store."""


class EvaluationError(FedulError, ValueError):
    """A metric is undefined for its inputs (e.g. angle with a zero vector)."""
