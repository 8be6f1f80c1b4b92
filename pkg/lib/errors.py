"""
Exception hierarchy shared by all library modules.
"""


class BiscuitError(Exception):
    """Base class for every error raised by the library."""


class ShapeError(BiscuitError, ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, shape_a: tuple[int, ...], shape_b: tuple[int, ...] | None = None):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = None if shape_b is None else tuple(shape_b)
        if shape_b is None:
            message = f"{op}: unsupported operand shape {self.shape_a}"
        else:
            message = f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}"
        super().__init__(message)


class NumericError(BiscuitError):
    """Non-finite values appeared where finite values are required."""

    def __init__(self, message: str, epoch: int | None = None, batch_index: int | None = None):
        self.epoch = epoch
        self.batch_index = batch_index
        if epoch is not None and batch_index is not None:
            message = f"{message} (epoch {epoch}, batch {batch_index})"
        super().__init__(message)


class ConfigError(BiscuitError, ValueError):
    """Invalid experiment configuration; `field` is the dotted path of the culprit."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DatasetError(BiscuitError):
    """Dataset directory could not be written or read."""


class CheckpointError(BiscuitError):
    """Checkpoint file is truncated, of the wrong version or does not match the model."""


class StageError(BiscuitError):
    """A training stage was requested out of order."""


class EvaluationError(BiscuitError, ValueError):
    """Held-out data cannot be scored: too few frames, a constant causal variable or no live latent."""
