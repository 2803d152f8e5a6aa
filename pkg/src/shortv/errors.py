"""Exception hierarchy shared by every module."""


class ShortVError(Exception):
    """Base class for toolkit errors."""


class ShapeError(ShortVError, ValueError):
    """Operand dimensions do not agree."""


class InputError(ShortVError, ValueError):
    """Malformed or out-of-range input data."""


class DegenerateInputError(InputError):
    """Input is well-formed but mathematically degenerate (e.g. zero norm)."""


class ScheduleError(InputError):
    """A layer plan or pruning schedule cannot be executed."""


class NumericError(ShortVError, ArithmeticError):
    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class StateError(ShortVError, RuntimeError):
    """An operation needs state that was not captured."""


class AccountingError(ShortVError, RuntimeError):
    """Analytical and instrumented FLOP counts disagree."""
