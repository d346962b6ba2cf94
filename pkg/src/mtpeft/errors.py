"""Exception types shared across the package."""

from __future__ import annotations


class MtpeftError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MtpeftError, ValueError):
    """Operands of an operation have incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " and ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class InvalidArgumentError(MtpeftError, ValueError):
    """An argument is outside its valid domain (axis, rate, id, label, ...)."""


class GradientError(MtpeftError, RuntimeError):
    """Backward pass or gradient check cannot proceed."""


class ConfigError(MtpeftError, ValueError):
    """A configuration value is invalid; ``field`` names the offending key."""

    def __init__(self, field: str, message: str, line: int | None = None):
        self.field = field
        self.message = message
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field}: {message}")


class DataError(MtpeftError, ValueError):
    """A dataset is missing, empty, or mostly malformed."""


class TrainingDivergedError(MtpeftError, RuntimeError):
    def __init__(self, step: int, value: float, detail: str = ""):
        self.step = step
        self.value = value
        msg = f"training diverged at step {step} (loss={value})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class NonFiniteError(MtpeftError, ValueError):
    """A loss or gradient contains NaN/inf; ``where`` names the source."""

    def __init__(self, where: str, message: str = "non-finite value"):
        self.where = where
        super().__init__(f"{where}: {message}")


class ReportMismatchError(MtpeftError, ValueError):
    """Run reports cannot be compared (task sets or metrics disagree)."""
