"""Exception taxonomy shared by every module and the CLI."""


class SpacoError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SpacoError):
    """Shape or size precondition violated."""


class ArgumentError(SpacoError, ValueError):
    """A scalar argument is outside its documented range."""


class ConfigError(SpacoError):
    """Invalid configuration value or unknown configuration key."""


class DataError(SpacoError):
    """Dataset contents violate a documented invariant."""


class NumericsError(SpacoError):
    """Non-finite values encountered where finiteness is guaranteed."""


class ParseError(SpacoError):
    """Malformed file; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
