"""Exception hierarchy shared by every module."""


class TidyLidError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(TidyLidError, ValueError):
    pass


class StateError(TidyLidError, RuntimeError):
    """Backward pass requested without a cached forward pass."""


class NonFiniteActivation(TidyLidError, FloatingPointError):
    pass


class NonFiniteGradient(TidyLidError, FloatingPointError):
    pass


class NonFiniteScore(TidyLidError, ValueError):
    pass


class ZeroNorm(TidyLidError, ValueError):
    pass


class OutOfRange(TidyLidError, ValueError):
    pass


# audio
class UnsupportedFormat(TidyLidError, ValueError):
    pass


class TooShort(TidyLidError, ValueError):
    pass


class ZeroEnergyNoise(TidyLidError, ValueError):
    pass


class EmptySpeech(TidyLidError, ValueError):
    pass


class EmptyImpulse(TidyLidError, ValueError):
    pass


class EmptyPool(TidyLidError, ValueError):
    pass


# metrics / scoring
class EmptySet(TidyLidError, ValueError):
    pass


class EmptyClass(TidyLidError, ValueError):
    pass


class DegenerateLabels(TidyLidError, ValueError):
    pass


class EmptyEnrollment(TidyLidError, ValueError):
    pass


# corpus
class InfeasibleSpec(TidyLidError, ValueError):
    pass


class InfeasibleSplit(TidyLidError, ValueError):
    pass


class InfeasibleTrials(TidyLidError, ValueError):
    pass


# pipeline
class DataError(TidyLidError, RuntimeError):
    pass


class DivergenceError(TidyLidError, FloatingPointError):
    pass


class UnknownLabel(TidyLidError, KeyError):
    pass


class MissingUtterance(TidyLidError, KeyError):
    pass


class CorruptCheckpoint(TidyLidError, ValueError):
    pass


class VersionMismatch(TidyLidError, ValueError):
    pass
