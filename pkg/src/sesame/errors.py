"""Exception types shared across the package."""


class SesameError(Exception):
    """Base class for all package errors."""


class DimensionError(SesameError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(SesameError, ValueError):
    """A configuration value violates its documented constraints."""


class InputError(SesameError, ValueError):
    """Caller-supplied data is out of range or misaligned."""


class FormatError(SesameError, ValueError):
    """A file does not follow the expected layout."""


class EvaluationError(SesameError, ArithmeticError):
    """A function produced a non-finite value where a finite one was required."""


class DivergenceError(SesameError, ArithmeticError):
    """Training loss became non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"loss diverged to {loss!r} at step {step}")
        self.step = step
        self.loss = loss
