"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: usage problems exit 1,
malformed files exit 2, numeric failures exit 3.
"""


class AquilaError(Exception):
    """Base class for all package errors."""


class ShapeError(AquilaError, ValueError):
    """Operand dimensions are incompatible."""


class ConfigurationError(AquilaError, ValueError):
    """A configuration value violates a module precondition."""


class NumericError(AquilaError, ArithmeticError):
    """A NaN or infinity showed up where finite values are required."""


class EmptyLossError(NumericError):
    """Every position of a loss was masked out."""


class CapacityError(AquilaError, ValueError):
    """A sequence is longer than the decoder supports."""


class StateError(AquilaError, RuntimeError):
    """An operation ran before the state it depends on was prepared."""


class FormatError(AquilaError, ValueError):
    """A checkpoint or image file could not be decoded."""


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class BadMagicError(FormatError):
    pass


class UsageError(AquilaError):
    """Command-line arguments are inconsistent."""
