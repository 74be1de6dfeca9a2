"""Exception types raised across the package."""


class CapsTrafficError(Exception):
    """Base class for all errors raised by capstraffic."""


class ShapeError(CapsTrafficError, ValueError):
    """Operand shapes are incompatible for the requested operation."""

    def __init__(self, message, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class GradientError(CapsTrafficError, ArithmeticError):
    """A gradient or function value was non-finite, or backward was misused."""


class TrainingError(CapsTrafficError, RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, step, last_finite_loss):
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"non-finite loss at step {step} (last finite loss: {last_finite_loss})"
        )


class DataError(CapsTrafficError, ValueError):
    """Input data violates the expected format or content rules."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GeometryError(CapsTrafficError, ValueError):
    """Task geometry (L, M, N) does not fit the model, data, or checkpoint."""


class CheckpointError(CapsTrafficError, IOError):
    """Checkpoint file is corrupt, truncated, or of an unsupported version."""


class OutputError(CapsTrafficError, OSError):
    """Writing a result file failed."""
