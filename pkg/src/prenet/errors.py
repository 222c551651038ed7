"""Exception hierarchy shared by all prenet modules."""


class PrenetError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(PrenetError, ValueError):
    """A caller passed a value outside an operation's preconditions."""


class DegenerateGeometryError(PrenetError):
    """Points are collinear, coincident, or otherwise cannot support a plane."""


class FormatError(PrenetError):
    """A file does not follow the expected binary or text layout."""


class CorruptFileError(FormatError):
    """A file has the right magic but its payload is truncated or oversized."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericFailureError(PrenetError, ArithmeticError):
    """Training produced a non-finite loss."""


class ConfigMismatchError(PrenetError):
    """A checkpoint's configuration does not match the requested one."""
