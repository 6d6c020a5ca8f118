"""Exception hierarchy shared by every module."""


class IdlikeError(Exception):
    """Base class for all errors raised by this package."""


# embedcore
class ZeroVector(IdlikeError, ValueError):
    pass


class DimensionMismatch(IdlikeError, ValueError):
    pass


class EmptyInput(IdlikeError, ValueError):
    pass


class NonPositiveTemperature(IdlikeError, ValueError):
    pass


# encoder
class BackendUnavailable(IdlikeError, RuntimeError):
    pass


class InvalidImage(IdlikeError, ValueError):
    pass


class GradientUnsupported(IdlikeError, RuntimeError):
    pass


class UnknownToken(IdlikeError, KeyError):
    pass


# miner
class DegenerateImage(IdlikeError, ValueError):
    pass


class InsufficientCrops(IdlikeError, ValueError):
    pass


# promptlearn
class LabelOutOfRange(IdlikeError, IndexError):
    pass


class NoOodPrompts(IdlikeError, ValueError):
    pass


class TooFewPrompts(IdlikeError, ValueError):
    pass


class DivergenceDetected(IdlikeError, FloatingPointError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class CheckpointError(IdlikeError, ValueError):
    pass


# metrics
class EmptyScores(IdlikeError, ValueError):
    pass


class LengthMismatch(IdlikeError, ValueError):
    pass


# harness
class MissingFile(IdlikeError, FileNotFoundError):
    pass


class UnknownLabel(IdlikeError, KeyError):
    pass


class EmptyManifest(IdlikeError, ValueError):
    pass


class InsufficientSamples(IdlikeError, ValueError):
    pass


class ConfigError(IdlikeError, ValueError):
    pass


class CacheFormatError(IdlikeError, ValueError):
    pass


class NotUnitNorm(IdlikeError, ValueError):
    pass
