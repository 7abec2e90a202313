"""Exception types shared across the package.

The CLI maps UsageError/InputError to exit code 1 and FormatError to
exit code 2; everything else is a bug.
"""


class VidlangError(Exception):
    pass


class DimensionError(VidlangError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(VidlangError):
    """A value lies outside the mathematical domain of the operation."""


class UsageError(VidlangError):
    """The API was called in a way its contract forbids."""


class InputError(VidlangError):
    """User-supplied data violates a task precondition (e.g. blank count)."""


class UnsupportedError(VidlangError):
    """A configuration the implementation deliberately does not support."""


class FormatError(VidlangError):
    """A serialized file is malformed. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
