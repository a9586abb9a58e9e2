"""
Earmark - Error Types

Every failure the library can report derives from EarmarkError so the CLI
can map it to an exit code in one place:

- RejectedInputError     -> bad shapes, bad config, bad hyperparameters
- NonFiniteError         -> NaN/Inf in embeddings, gradients or losses
- DegenerateInputError   -> zero-norm vectors
- UndefinedMetricError   -> correlation over a constant or too-short series
- ModelStateError        -> backward without forward, bad checkpoint
- DatasetFormatError     -> malformed record file (path, line, field)
- TrainingDivergedError  -> non-finite loss mid-training (epoch, batch)
"""


class EarmarkError(Exception):
    """Base class for all Earmark errors."""


class RejectedInputError(EarmarkError, ValueError):
    """Input violates a documented precondition."""


class NonFiniteError(RejectedInputError):
    """A value that must be finite contains NaN or Inf."""

    def __init__(self, message, batch=None, value=None):
        self.batch = batch
        self.value = value
        super().__init__(message)


class DegenerateInputError(EarmarkError, ValueError):
    """A vector has zero norm where a direction is required."""


class UndefinedMetricError(EarmarkError):
    """A correlation is undefined for the given series."""


class ModelStateError(EarmarkError, RuntimeError):
    """The model is not in a state that allows the requested operation."""


class DatasetFormatError(EarmarkError):
    """
    A dataset or ratings file could not be parsed.

    Attributes:
        path: File being read (may be None for in-memory parsing)
        line_number: 1-indexed line of the failure
        field: Name of the offending field, if known
    """

    def __init__(self, message, path=None, line_number=None, field=None):
        self.path = path
        self.line_number = line_number
        self.field = field
        location = []
        if path is not None:
            location.append(str(path))
        if line_number is not None:
            location.append(f"line {line_number}")
        if field is not None:
            location.append(f"field '{field}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")


class TrainingDivergedError(EarmarkError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, batch, value: float, phase: str = "training"):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        self.phase = phase
        where = f"epoch {epoch}" if batch is None else f"epoch {epoch}, batch {batch}"
        super().__init__(f"non-finite {phase} loss {value!r} at {where}")
