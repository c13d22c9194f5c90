"""Exception hierarchy shared by all modules."""


class ConfigurationError(ValueError):
    """Invalid shapes, hyperparameters or file layouts."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class EmptyLossError(ValueError):
    """Every cell of a loss computation was masked out."""


class CheckInvalidError(RuntimeError):
    """A gradient check could not be performed meaningfully."""


class IngestionError(ValueError):
    """Stop-event records that cannot be assembled into day matrices."""


class SequencingError(ValueError):
    """Observations arriving out of segment order."""


class CheckpointError(IOError):
    """Unreadable, corrupted or incompatible checkpoint file."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss.

    Attributes:
        checkpoint: the last checkpoint whose loss was finite.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
