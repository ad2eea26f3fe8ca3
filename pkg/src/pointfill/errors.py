"""Exception taxonomy shared by all pointfill modules.

CLI exit codes: ConfigError -> 2, DataError -> 3, NumericAbort -> 4.
"""


class PointfillError(Exception):
    """Base class for all pointfill errors."""


class DimensionError(PointfillError, ValueError):
    """Operand shapes are not conformable for the requested operation."""


class ArgumentError(PointfillError, ValueError):
    """An argument value violates an operation's precondition."""


class ConfigError(PointfillError, ValueError):
    """A configuration value is out of its legal range."""


class DataError(PointfillError, OSError):
    """A dataset or store file is missing, truncated, or malformed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TapeError(PointfillError, RuntimeError):
    """Backward called on a detached or already-consumed tape."""


class NumericAbort(PointfillError, RuntimeError):
    """Training aborted on a non-finite loss; last good checkpoint retained."""
