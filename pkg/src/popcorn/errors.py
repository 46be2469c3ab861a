"""Exception hierarchy shared by all popcorn modules."""


class PopcornError(Exception):
    """Base class for every error raised by this package."""


class DomainError(PopcornError, ValueError):
    """An argument lies outside the domain of a cryptographic operation."""


class ConfigurationError(PopcornError):
    """Unsupported parameters or an exhausted retry budget."""


class BoundOverflowError(PopcornError, OverflowError):
    """A plaintext magnitude would exceed its certified bound."""


class ShapeError(PopcornError, ValueError):
    """Tensor or layer dimensions are inconsistent."""


class FormatError(PopcornError, ValueError):
    """A serialized file or wire payload is malformed."""


class ProtocolAbort(PopcornError):
    """The two-party session was aborted.

    ``code`` is one of the :class:`AbortReason` codes.
    """

    def __init__(self, code, message=""):
        super().__init__(message or f"session aborted (reason code {int(code)})")
        self.code = int(code)


class AbortReason:
    """Coarse, value-independent reason codes carried by ABORT frames."""
    PROTOCOL_ORDER = 1
    MALFORMED = 2
    BOUND = 3
    VERSION = 4
    INTERNAL = 5
    CONNECTION = 6
