"""Exception hierarchy shared by every stage of the music-word pipeline."""


class MusicWordError(Exception):
    """Base class for all errors raised by this package."""


class InputError(MusicWordError, ValueError):
    """The caller handed us something we cannot work with (exit code 1)."""


class InvariantViolation(MusicWordError):
    """An internal contract was broken (exit code 2)."""


class MidiParseError(InputError):
    """Malformed Standard MIDI File."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(InputError):
    pass


class InitError(InputError):
    pass


class ReferenceDegenerateError(InputError):
    pass


class EmptyResponseError(InputError):
    pass


class EmptyDictionaryError(InputError):
    pass


class UndefinedMetricError(InputError):
    pass


class InsufficientDataError(InputError):
    pass


class TransformDegenerateError(InputError):
    pass


class ContractViolation(InvariantViolation):
    pass
