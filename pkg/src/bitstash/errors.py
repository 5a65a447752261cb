"""Exception types raised across the package."""


class BitstashError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BitstashError, ValueError):
    """An argument violates an operation's precondition."""


class CorruptStashError(BitstashError):
    """A stored payload is internally inconsistent (e.g. popcount != len(values))."""


class ProtocolViolationError(BitstashError, RuntimeError):
    """A stash handle was used out of order: restored twice, or never stored."""


class SpecParseError(InvalidInputError):
    """A model-spec document could not be turned into a valid model."""

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class OutOfBandWarning(UserWarning):
    """A measured saving fell outside the range reported for full-scale models."""
