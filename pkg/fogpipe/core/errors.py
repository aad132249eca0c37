"""
Exception hierarchy for fogpipe.

Every error carries the process exit code the CLI reports for it:
1 for configuration problems, 2 for data problems and 3 when inference
cannot find a usable channel.
"""


class FogPipeError(Exception):
    """Base class for all fogpipe errors."""

    exit_code = 2


class ConfigError(FogPipeError):
    """Invalid or inconsistent configuration."""

    exit_code = 1


class BadConfig(ConfigError):
    pass


class BadRatios(ConfigError):
    pass


class DataError(FogPipeError, ValueError):
    """Input data or intermediate artifacts violate a precondition."""

    exit_code = 2


class MissingColumn(DataError):
    pass


class RaggedRows(DataError):
    pass


class EmptyRecording(DataError):
    pass


class BadEventTrack(DataError):
    pass


class BadFactor(DataError):
    pass


class TooFewSubjects(DataError):
    pass


class RecordingTooShort(DataError):
    pass


class BadLength(DataError):
    pass


class OutOfRange(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class DegenerateBatch(DataError):
    pass


class OddDims(DataError):
    pass


class BadRate(DataError):
    pass


class EmptyTrainingSet(DataError):
    pass


class EmptyShard(DataError):
    pass


class EmptyUpdateList(DataError):
    pass


class LengthMismatch(DataError):
    pass


class UnsortedInput(DataError):
    pass


class GridMismatch(DataError):
    pass


class MissingF1(DataError):
    pass


class MissingWindowKey(DataError):
    pass


class ContainerError(DataError):
    """A weight container could not be decoded."""


class VersionMismatch(ContainerError):
    pass


class ChecksumFailure(ContainerError):
    pass


class InferenceError(FogPipeError):
    """Inference could not produce a prediction."""

    exit_code = 3


class AllChannelsFailed(InferenceError):
    pass
