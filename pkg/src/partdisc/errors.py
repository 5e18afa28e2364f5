"""Exception hierarchy shared across the package."""


class PartdiscError(Exception):
    """Base class for all library errors."""


class FormatError(PartdiscError):
    """Container file is malformed (bad magic, version, or truncation)."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedRecordError(FormatError):
    def __init__(self, record_index, message=None):
        self.record_index = record_index
        super().__init__(message or f"file truncated in record {record_index}")


class ValidationError(PartdiscError):
    """Data violates a container or model invariant (e.g. non-finite values)."""


class NumericalError(PartdiscError):
    """A numerical routine failed (collapse, zero column, divergence)."""
