"""Exception hierarchy shared by every fogsound module."""


class FogSoundError(Exception):
    """Base class for all package errors."""


# audio
class NotFound(FogSoundError, FileNotFoundError):
    pass


class MalformedHeader(FogSoundError, ValueError):
    pass


class UnsupportedFormat(FogSoundError, ValueError):
    pass


class InvalidFrameSize(FogSoundError, ValueError):
    pass


class InvalidClass(FogSoundError, ValueError):
    pass


class EmptyDataset(FogSoundError, ValueError):
    pass


class IoFailure(FogSoundError, OSError):
    pass


# features
class EmptyClip(FogSoundError, ValueError):
    pass


class InvalidRange(FogSoundError, ValueError):
    pass


class InvalidLength(FogSoundError, ValueError):
    pass


class WrongDimension(FogSoundError, ValueError):
    pass


# classifier
class DimensionMismatch(FogSoundError, ValueError):
    pass


class DivergenceDetected(FogSoundError, ArithmeticError):
    pass


class TooSmall(FogSoundError, ValueError):
    pass


class VersionMismatch(FogSoundError, ValueError):
    pass


class CorruptModel(FogSoundError, ValueError):
    pass


# placement / power / sim
class UnknownPreset(FogSoundError, KeyError):
    pass


class InvalidConfig(FogSoundError, ValueError):
    pass


class MalformedTimeline(FogSoundError, ValueError):
    pass


# wire
class ProtocolError(FogSoundError, ValueError):
    pass


class UnknownKind(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class BindFailure(FogSoundError, OSError):
    pass


class ConnectFailure(FogSoundError, OSError):
    pass


class HandlerFailure(FogSoundError):
    pass


class Timeout(FogSoundError, TimeoutError):
    pass
