"""Exception types shared across the package."""


class VCTError(Exception):
    """Base class for all package errors."""


class InvalidRangeError(VCTError, ValueError):
    pass


class ShapeMismatchError(VCTError, ValueError):
    pass


class TimestepError(VCTError, ValueError):
    pass


class TooFewFramesError(VCTError, ValueError):
    pass


class FormatError(VCTError, IOError):
    """A persisted artifact could not be decoded."""


class MissingFileError(FormatError, FileNotFoundError):
    pass


class CorruptFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class ConfigError(VCTError, ValueError):
    pass


class SummarizerError(VCTError, RuntimeError):
    pass
