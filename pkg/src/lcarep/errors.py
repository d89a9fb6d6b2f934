"""Exception hierarchy shared by every stage of the pipeline."""


class LcaRepError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class InvalidArgumentError(LcaRepError, ValueError):
    exit_code = 1


class ConfigError(LcaRepError, ValueError):
    exit_code = 1


class FormatError(LcaRepError):
    """Malformed binary or text payload. ``offset`` is the byte offset of the fault."""

    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DatasetError(LcaRepError):
    exit_code = 2


class MiningError(LcaRepError):
    exit_code = 3


class TrainingError(LcaRepError):
    exit_code = 3
