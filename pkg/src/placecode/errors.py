"""Exception types shared across the package.

The CLI maps these onto stable exit codes: usage errors exit 1, data
errors exit 2, numeric failures exit 3.
"""


class UsageError(Exception):
    """Bad command-line invocation."""


class ValidationError(ValueError):
    """An input violates a documented precondition."""


class ShapeError(ValidationError):
    """Array shape incompatible with the requested operation."""


class DataError(Exception):
    """Missing, unreadable, or malformed on-disk data."""


class CheckpointError(DataError):
    """Checkpoint archive is corrupt or disagrees with the config."""


class FingerprintMismatchError(DataError):
    """Descriptor index was built under a different checkpoint."""


class NumericError(Exception):
    """A loss term became non-finite; carries the offending term name."""

    def __init__(self, term: str, message: str | None = None):
        self.term = term
        super().__init__(message or f"loss term '{term}' is not finite")
