"""Exception hierarchy shared by every subsystem."""


class FacadesegError(Exception):
    """Base class for all library errors."""


# --- tensor engine ---------------------------------------------------------

class ShapeMismatch(FacadesegError):
    pass


class NumericOverflow(FacadesegError):
    """An operation produced a NaN/Inf from finite inputs."""


class NotScalar(FacadesegError):
    pass


class GraphConsumed(FacadesegError):
    """Second backward through an already-consumed graph."""


class MissingGradient(FacadesegError):
    pass


class NonFiniteLoss(FacadesegError):
    pass


# --- text model ------------------------------------------------------------

class UnsupportedCharacter(FacadesegError):
    pass


class IdOutOfRange(FacadesegError):
    pass


class SequenceTooLong(FacadesegError):
    pass


class MissingImgPlaceholder(FacadesegError):
    pass


class MultipleImgPlaceholders(FacadesegError):
    pass


class TargetNotFound(FacadesegError):
    pass


# --- vision / seg head -----------------------------------------------------

class NonDivisibleDims(FacadesegError):
    pass


class NoSegToken(FacadesegError):
    pass


class BadThreshold(FacadesegError):
    pass


# --- objective -------------------------------------------------------------

class NoSupervisedPositions(FacadesegError):
    pass


class NonFinite(FacadesegError):
    pass


# --- data ------------------------------------------------------------------

class DataError(FacadesegError):
    """Base for dataset generation / IO errors."""


class SpecInfeasible(DataError):
    pass


class UnknownClass(DataError):
    pass


class EmptyDescription(DataError):
    pass


class TooFewSamples(DataError):
    pass


class MalformedRecord(DataError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class MissingFile(DataError):
    pass


class BadMagic(DataError):
    pass


class NonBinaryMaskValue(DataError):
    pass


class EmptySplit(DataError):
    pass


# --- checkpoints -----------------------------------------------------------

class CheckpointError(FacadesegError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


class BadConfig(FacadesegError):
    pass
