"""Error types raised by the adaptation lab.

Every error carries a human readable message plus the structured fields a
command needs to write its ``error.json`` record.
"""


class DwlError(Exception):
    """Base class for all lab errors."""

    def to_record(self):
        """Machine-readable error record, same shape as the command responses."""
        return {
            'status': 'error',
            'error': str(self),
            'kind': type(self).__name__,
        }


class ShapeError(DwlError, ValueError):
    """Operand shapes are not conformable."""

    def __init__(self, op, left, right=None):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right) if right is not None else None
        if self.right is None:
            message = f"{op}: unsupported shape {self.left}"
        else:
            message = f"{op}: shape mismatch {self.left} vs {self.right}"
        super().__init__(message)


class NumericError(DwlError, ArithmeticError):
    """An operation produced NaN or Inf."""

    def __init__(self, op, detail='non-finite output'):
        self.op = op
        super().__init__(f"{op}: {detail}")


class TapeError(DwlError, RuntimeError):
    """Misuse of a gradient tape."""


class ModelError(DwlError, ValueError):
    """Invalid model dimensions or an unusable checkpoint."""


class OptimizerError(DwlError, ValueError):
    """Missing or non-finite gradients at step time."""


class DataError(DwlError, ValueError):
    """Invalid dataset parameters or contents."""


class IdxFormatError(DataError):
    """An IDX file violates the format."""


class EstimatorError(DwlError, ValueError):
    """Invalid input to an alignment or discriminability estimator."""


class ConfigError(DwlError, ValueError):
    """Experiment configuration failed validation."""

    def __init__(self, message, details=None):
        self.details = details or {}
        super().__init__(message)

    def to_record(self):
        record = super().to_record()
        record['details'] = self.details
        return record


class TrainingDivergedError(DwlError, RuntimeError):
    """A loss became non-finite or exceeded the divergence limit."""

    def __init__(self, substep, epoch, batch, detail):
        self.substep = substep
        self.epoch = epoch
        self.batch = batch
        where = f"epoch {epoch}" if batch is None else f"epoch {epoch}, batch {batch}"
        super().__init__(f"training diverged in sub-step {substep} ({where}): {detail}")

    def to_record(self):
        record = super().to_record()
        record.update({'substep': self.substep, 'epoch': self.epoch, 'batch': self.batch})
        return record
