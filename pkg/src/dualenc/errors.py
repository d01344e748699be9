"""Exception hierarchy shared by every module."""


class DualEncError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DualEncError, ValueError):
    pass


class StateError(DualEncError, RuntimeError):
    pass


class DegenerateInputError(DualEncError, ValueError):
    pass


class NumericError(DualEncError, ArithmeticError):
    pass


class ConfigError(DualEncError, ValueError):
    pass


class LayoutError(DualEncError, ValueError):
    pass


class FormatError(DualEncError, ValueError):
    """Malformed FMAT payload. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
