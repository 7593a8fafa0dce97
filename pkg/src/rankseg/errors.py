"""Exception types shared across the package."""


class RanksegError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RanksegError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class ConfigError(RanksegError, ValueError):
    """An invalid hyperparameter or configuration value."""


class ValidationError(RanksegError, ValueError):
    """Input data violates a value-level precondition (e.g. non-binary mask)."""


class CorruptionError(RanksegError):
    """A binary file is malformed. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IncompatibleVersionError(RanksegError):
    """A file was written by an unsupported format version."""


class DegenerateInstance(RanksegError):
    """Every perturbed map was constant, so no rank information is available."""


class GenerationError(RanksegError):
    """Synthetic scene generation could not satisfy its constraints."""


class NumericAbort(RanksegError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
