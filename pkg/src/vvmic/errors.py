"""Exception types shared across the package."""


class VvmicError(Exception):
    """Base class for all codec errors."""


class FormatError(VvmicError, ValueError):
    """A file or container does not follow its declared layout."""


class TruncatedError(VvmicError, OSError):
    """A file or stream ended before its declared payload."""


class DecodeError(VvmicError, ValueError):
    """An entropy-coded stream could not be decoded."""


class ShapeError(VvmicError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ConfigError(VvmicError, ValueError):
    """Invalid configuration or model parameters."""


class CompatibilityError(VvmicError):
    """A checkpoint does not match the bitstream or architecture it is used with."""


class NumericError(VvmicError, ArithmeticError):
    """Non-finite or out-of-domain numeric values."""
