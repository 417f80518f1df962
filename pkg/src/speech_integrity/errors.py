"""Exception hierarchy shared by every module of the toolkit."""


class SpeechIntegrityError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 2


class InvalidArgument(SpeechIntegrityError, ValueError):
    pass


class ParseError(SpeechIntegrityError):
    """Malformed RIFF/WAVE data or a malformed binary container."""


class UnsupportedFormat(SpeechIntegrityError):
    pass


class IoError(SpeechIntegrityError, OSError):
    pass


class TooShort(SpeechIntegrityError):
    exit_code = 3


class EmptyInput(SpeechIntegrityError):
    pass


class ShapeError(SpeechIntegrityError):
    pass


class DataError(SpeechIntegrityError):
    pass


class InfeasibleEdit(SpeechIntegrityError):
    """A tampering op could not be placed inside the available voiced regions."""


class ConfigMismatch(SpeechIntegrityError):
    pass


class CorpusTooSmall(SpeechIntegrityError):
    pass


class TrainingDiverged(SpeechIntegrityError):
    pass
