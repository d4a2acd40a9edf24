"""Exception hierarchy shared by every vlct subpackage."""


class VlctError(Exception):
    """Base class for all package errors."""


# volume handling
class EmptyVolume(VlctError):
    pass


class InvalidRescale(VlctError):
    pass


class InvalidSpacing(VlctError):
    pass


class NoEligibleSeries(VlctError):
    pass


class ContainerFormatError(VlctError):
    pass


# slice encoding
class IndexOutOfRange(VlctError):
    pass


class VolumeTooSmall(VlctError):
    pass


# labeling
class TeacherUnavailable(VlctError):
    pass


class UnparseableVote(VlctError):
    pass


class WrongVoteCount(VlctError):
    pass


class LexiconError(VlctError):
    pass


# representation
class MissingEmbedding(VlctError, KeyError):
    pass


class EmptyInput(VlctError, ValueError):
    pass


class TooManySlices(VlctError):
    pass


class ShapeMismatch(VlctError, ValueError):
    pass


class ZeroVector(VlctError, ValueError):
    pass


# training
class InvalidTemperature(VlctError, ValueError):
    pass


class NonFiniteGradient(VlctError, FloatingPointError):
    pass


class EmptySplit(VlctError):
    pass


# evaluation
class NoPositiveInGallery(VlctError):
    pass


class DegenerateLabels(VlctError, ValueError):
    pass


class LengthMismatch(VlctError, ValueError):
    pass


# generation
class EmptyIndex(VlctError):
    pass


class EmptyPool(VlctError):
    pass


class GenerationUnavailable(VlctError):
    pass


# orchestration
class MissingPrerequisite(VlctError):
    pass


class ConfigHashMismatch(VlctError):
    pass


class ConfigError(VlctError, ValueError):
    pass
