class MorphDiffError(Exception):
    """Base class for errors raised by morphdiff."""


class ShapeError(MorphDiffError, ValueError):
    pass


class NumericalError(MorphDiffError, ArithmeticError):
    """A non-finite value showed up in a loss, a sampling step or a gradient check."""

    def __init__(self, message: str, term: str | None = None, step: int | None = None):
        super().__init__(message)
        self.term = term
        self.step = step


class CheckpointError(MorphDiffError):
    pass


class DatasetError(MorphDiffError):
    pass
