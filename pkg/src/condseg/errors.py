"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation problems exit with 2,
numerical failures with 3.
"""


class CondsegError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(CondsegError, ValueError):
    """Bad shapes, configs, metadata or files supplied by the caller."""

    exit_code = 2


class ShapeError(ValidationError):
    """Tensor extents do not line up.

    ``dim`` names the offending dimension so callers can report it.
    """

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


class MetadataError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


class CorruptFileError(CheckpointError):
    pass


class NumericalError(CondsegError, ArithmeticError):
    """Raised by the NaN guard during training."""

    exit_code = 3
