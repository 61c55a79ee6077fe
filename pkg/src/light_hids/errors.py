"""Exception hierarchy shared by every stage of the pipeline."""


class LightHidsError(Exception):
    """Base class for all errors raised by light_hids."""

    exit_code = 1


class DataError(LightHidsError):
    exit_code = 3


class EmptyTrace(DataError):
    pass


class TraceEncodingError(DataError):
    pass


class InsufficientData(DataError):
    pass


class EmptyTrainingSet(DataError):
    pass


class InsufficientScores(DataError):
    pass


class NonFiniteScore(DataError):
    pass


class NonFiniteInput(DataError):
    pass


class LengthMismatch(DataError):
    pass


class BadParameter(LightHidsError):
    exit_code = 2


class ShapeError(LightHidsError):
    """Tensor shapes do not line up."""

    exit_code = 3


class ShapeMismatch(ShapeError):
    pass


class TokenOutOfRange(ShapeError):
    pass


class IndivisibleLength(ShapeError):
    pass


class TapeMismatch(ShapeError):
    pass


class DimensionMismatch(ShapeError):
    pass


class EmptySample(DataError):
    pass


class DivergenceDetected(LightHidsError):
    exit_code = 5

    def __init__(self, epoch, loss):
        super().__init__(f"loss became non-finite ({loss}) in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class ArtifactError(LightHidsError):
    exit_code = 4


class CorruptArtifact(ArtifactError):
    pass


class VersionMismatch(ArtifactError):
    pass


class WrongKind(ArtifactError):
    pass


class ArtifactMismatch(ArtifactError):
    def __init__(self, what, expected, got):
        super().__init__(f"{what} mismatch: expected {expected}, got {got}")
        self.what = what
        self.expected = expected
        self.got = got


class ConfigError(LightHidsError):
    exit_code = 2
