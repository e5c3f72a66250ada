"""Exception types shared across the codec."""


class CodecError(Exception):
    """Base class for all mgpc errors."""


class DimensionError(CodecError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ContractError(CodecError, ValueError):
    """An operation precondition was violated."""


class RangeError(CodecError, ValueError):
    """A coordinate or index lies outside the valid grid."""


class NumericError(CodecError, ArithmeticError):
    """A non-finite value appeared where finite math is required."""


class DecodeError(CodecError, ValueError):
    """A bitstream is corrupt, truncated or inconsistent with its header."""


class ConfigError(CodecError, ValueError):
    """Invalid configuration or missing prerequisite artifacts."""
