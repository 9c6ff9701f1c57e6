"""Exception hierarchy shared across the package."""


class MilsegError(Exception):
    pass


class DimensionError(MilsegError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(MilsegError, ValueError):
    """A configuration value is invalid or infeasible."""


class InputError(MilsegError, ValueError):
    """A data argument is outside the accepted domain."""


class UsageError(MilsegError, RuntimeError):
    """An API was called in a state where it cannot proceed."""


class CheckpointError(MilsegError, IOError):
    pass


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class ImageFormatError(MilsegError, IOError):
    """A PGM file is malformed or truncated."""
