"""Exception hierarchy. Every error raised by the package derives from MemvosError."""


class MemvosError(Exception):
    """Base class for all package errors."""


class NotFoundError(MemvosError):
    """A required file, directory, or sequence does not exist."""


class FormatError(MemvosError):
    """On-disk data does not match the expected layout or encoding."""


class ValidationError(MemvosError):
    """An argument or data structure violates a documented invariant."""


class UnsupportedError(MemvosError):
    """The request is well-formed but outside what the codec/model supports."""


class ProtocolError(MemvosError):
    """An operation was called out of order (e.g. inference before memory init)."""


class ConfigError(MemvosError):
    """A run configuration contains unknown keys or invalid values."""
