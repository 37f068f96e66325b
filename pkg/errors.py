"""
Exception hierarchy for cryoinr.

Every error raised on purpose by the pipeline derives from CryoInrError so the
command line can map it to an exit code.
"""


class CryoInrError(Exception):
    """Base class for all cryoinr errors."""

    exit_code = 1


# Configuration
class UnknownProfile(CryoInrError):
    pass


# MRC container
class MrcError(CryoInrError):
    pass


class TruncatedFile(MrcError):
    pass


class UnsupportedMode(MrcError):
    pass


class BadMagic(MrcError):
    pass


# Preprocessing
class PreprocessError(CryoInrError):
    pass


class CorruptStream(PreprocessError):
    exit_code = 4


class EmptySelection(UserWarning):
    """No voxel passed the threshold; the file is stored as occupancy only."""


# Network / checkpoint
class ModelError(CryoInrError):
    pass


class DimensionMismatch(ModelError):
    pass


class DuplicateFileId(ModelError):
    pass


class CorruptCheckpoint(ModelError):
    exit_code = 4


# Loss and optimizer
class LossError(CryoInrError):
    pass


class EmptyBatch(LossError):
    pass


class NonFiniteInput(LossError):
    pass


class ShapeMismatch(LossError):
    pass


# Training
class TrainingError(CryoInrError):
    pass


class EmptyStore(TrainingError):
    pass


class NonFiniteLoss(TrainingError):
    pass


# Archive
class CodecError(CryoInrError):
    pass


class UnknownFile(CodecError):
    def __init__(self, name, available=()):
        self.name = name
        self.available = list(available)
        listing = ', '.join(self.available) if self.available else '(none)'
        super().__init__(f"{name!r} not in archive; available: {listing}")


class CorruptArchive(CodecError):
    exit_code = 4


# Evaluation
class MetricsError(CryoInrError):
    pass


class DimsMismatch(MetricsError):
    pass


class EmptyEvaluationSet(MetricsError):
    pass


class ZeroRange(MetricsError):
    pass


class DivisionByZero(MetricsError, ZeroDivisionError):
    pass


# EMDB download
class FetchError(CryoInrError):
    pass


class InvalidAccession(FetchError):
    exit_code = 1


class NetworkError(FetchError):
    exit_code = 2


class NotFound(FetchError):
    exit_code = 3


class ChecksumOrParseFailure(FetchError):
    exit_code = 4
