"""Exception types shared across the package.

Each exception carries the CLI exit code it maps to, so the command layer
can translate failures without a lookup table.
"""


class ClipSepError(Exception):
    exit_code = 1


class InvalidInputError(ClipSepError, ValueError):
    exit_code = 2


class UsageError(ClipSepError):
    """Operation called on a model variant that does not support it."""

    exit_code = 2


class FormatError(ClipSepError, ValueError):
    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MissingEmbeddingError(ClipSepError, KeyError):
    exit_code = 4

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing embedding ids: " + ", ".join(repr(m) for m in self.missing))

    def __str__(self):
        return self.args[0]


class NumericError(ClipSepError, FloatingPointError):
    exit_code = 3


class ClipTooShortError(InvalidInputError):
    """Raised when a clip cannot hold a single analysis window."""
