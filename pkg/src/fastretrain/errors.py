"""Exception hierarchy shared by the solver, network and CLI layers."""


class FastRetrainError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FastRetrainError, ValueError):
    pass


class NonFiniteError(FastRetrainError, ValueError):
    pass


class RegularizationError(FastRetrainError, ValueError):
    pass


class SingularMatrixError(FastRetrainError, ArithmeticError):
    pass


class DivergenceError(FastRetrainError, ArithmeticError):
    """Training produced a non-finite loss or non-finite parameters."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch} (loss {loss!r})")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class ConfigError(FastRetrainError, ValueError):
    pass


class DataFormatError(FastRetrainError, ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class CheckpointError(FastRetrainError, ValueError):
    pass
