"""
Errors Module
Exception hierarchy shared by every layer of the toolkit
"""


class RagAdaptError(Exception):
    """Root of all toolkit errors"""


# Embeddings

class EmbeddingError(RagAdaptError):
    pass


class ZeroVector(EmbeddingError):
    pass


class DimensionMismatch(EmbeddingError):
    pass


class NormViolation(EmbeddingError):
    pass


# Embedding-store file format

class StoreFormatError(RagAdaptError):
    pass


class BadMagic(StoreFormatError):
    pass


class UnsupportedVersion(StoreFormatError):
    pass


class UnsupportedFlags(StoreFormatError):
    pass


class TruncatedFile(StoreFormatError):
    pass


class TrailingBytes(StoreFormatError):
    pass


class InvalidLabel(StoreFormatError):
    pass


# Retrieval

class RetrievalError(RagAdaptError):
    pass


class BudgetExceedsDatabase(RetrievalError):
    pass


class EmptyQueryClass(RetrievalError):
    pass


class InvalidWorld(RetrievalError):
    pass


# Adaptation heads and training

class AdaptationError(RagAdaptError):
    pass


class HeadMismatch(AdaptationError):
    pass


class WeightSumViolation(AdaptationError):
    pass


class EmptySampleSet(AdaptationError):
    pass


class NonFiniteGradient(AdaptationError):
    pass


class ShapeMismatch(AdaptationError):
    pass


# Synthetic worlds

class WorldError(RagAdaptError):
    pass


class TooManyClasses(WorldError):
    pass


class UnreachableSeparation(WorldError):
    pass


class SeparationRejected(WorldError):
    pass


class InvalidWorldConfig(WorldError):
    pass


# Theory checks

class TheoryError(RagAdaptError):
    pass


class AssumptionViolated(TheoryError):
    pass


class NegativeThresholdWarning(UserWarning):
    """phi_set called with a threshold that drops the anchor class"""


# Command layer

class ConfigInvalid(RagAdaptError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class RunDirectoryExists(RagAdaptError):
    pass
