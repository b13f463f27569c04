"""Exception hierarchy shared by every fastadd module."""


class FastaddError(Exception):
    pass


class ShapeError(FastaddError, ValueError):
    pass


class DomainError(FastaddError, ValueError):
    pass


class NumericError(FastaddError, ArithmeticError):
    pass


class ConfigError(FastaddError, ValueError):
    pass


class InputError(FastaddError, ValueError):
    pass


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, last_finite_step: int):
        super().__init__(message)
        self.last_finite_step = last_finite_step


class CheckpointError(FastaddError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError, ShapeError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass
