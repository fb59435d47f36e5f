"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: usage problems exit 1, DataError
subclasses exit 2, and acceptance violations (a measured attack beating
its theoretical bound) exit 3.
"""


class DataError(Exception):
    """Malformed or inconsistent input data."""


class TraceFormatError(DataError):
    """A trace file violates the ``time<TAB>direction`` line format."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ManifestError(DataError):
    """A dataset manifest is malformed or carries unknown fields."""


class MissingArtifactError(DataError):
    """A pipeline stage needs an artifact that an earlier stage produces."""


class ConfigMismatchError(DataError):
    """A workspace artifact was produced under a different configuration."""


class BoundViolationError(Exception):
    """An empirical attack exceeded the theoretical accuracy bound."""
