"""Exception types shared across the package."""


class WscnError(Exception):
    """Base class for all package errors."""


class ShapeError(WscnError):
    """An operation received tensors with incompatible shapes."""


class ConfigError(WscnError):
    """A configuration value is out of range or inconsistent."""


class TapeError(WscnError):
    """Invalid use of the autodiff tape."""


class ArchiveError(WscnError):
    """Dataset archive could not be parsed or failed validation.

    ``offset`` is the byte offset (within the named entry, when one is
    given) where parsing stopped, or None for container-level failures.
    """

    def __init__(self, message, offset=None, entry=None):
        self.offset = offset
        self.entry = entry
        where = ""
        if entry is not None:
            where += f" [entry {entry}]"
        if offset is not None:
            where += f" [byte offset {offset}]"
        super().__init__(message + where)


class CheckpointError(WscnError):
    """Checkpoint container could not be parsed or failed validation."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} [byte offset {offset}]"
        super().__init__(message)


class DataError(WscnError):
    """Dataset contents violate the value-domain contract."""


class QuantError(WscnError):
    """Quantization parameters are missing or inconsistent."""
