"""Exception hierarchy shared across the package."""


class SoundLocError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SoundLocError, ValueError):
    """Raised when an argument violates a documented precondition."""


class ShapeMismatchError(InvalidInputError):
    pass


class CorruptFileError(SoundLocError):
    """An archive is truncated, has a bad magic number or fails its checksum."""


class VersionMismatchError(SoundLocError):
    pass


class EnumerationTooLargeError(SoundLocError):
    """The cluster-to-category search space exceeds the configured cap."""


class NoBoxError(SoundLocError):
    pass


class PartitionError(SoundLocError):
    """A clip id appears in more than one split."""


class SchemaError(SoundLocError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UntrainedHeadError(SoundLocError):
    pass
