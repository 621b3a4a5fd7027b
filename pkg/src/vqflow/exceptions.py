"""Exception hierarchy shared by every vqflow module."""


class VQFlowError(Exception):
    """Base class for all library errors."""


class DimensionError(VQFlowError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ContractError(VQFlowError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(VQFlowError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ConfigError(VQFlowError, ValueError):
    """An architecture or run configuration is internally inconsistent."""


class FormatError(VQFlowError, ValueError):
    """A binary file could not be parsed.

    Parameters
    ----------
    message
        Human readable description.
    offset
        Byte offset at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionError(VQFlowError, ValueError):
    """A checkpoint is incompatible with the requested configuration."""

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = tuple(fields)
