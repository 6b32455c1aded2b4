"""Exception hierarchy shared by every asyncfm module."""


class AsyncFMError(Exception):
    """Base class for all library errors."""


class InvalidArgument(AsyncFMError, ValueError):
    pass


class NumericError(AsyncFMError, ArithmeticError):
    pass


class InvalidState(AsyncFMError, RuntimeError):
    pass


class StaleCacheError(AsyncFMError):
    """A context cache was used with a context it was not built from."""


class FormatError(AsyncFMError, ValueError):
    """A binary container or config document could not be parsed."""


class ConfigError(FormatError):
    """An experiment config document is malformed or has unknown/mistyped keys."""


class DigestMismatch(FormatError):
    def __init__(self, what: str, expected: str, found: str):
        super().__init__(f"{what} digest mismatch: expected {expected}, found {found}")
        self.expected = expected
        self.found = found
