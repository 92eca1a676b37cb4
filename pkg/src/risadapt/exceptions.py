"""Exception hierarchy shared across the package."""


class RisAdaptError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(RisAdaptError, ValueError):
    pass


class DegenerateSceneError(RisAdaptError):
    """The interaction matrix of a scene instance is singular or invalid."""


class SelfInteractionError(DegenerateSceneError, ValueError):
    """Two dipoles sit at (numerically) the same position."""


class FormatError(RisAdaptError):
    """A binary or JSON artifact could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(RisAdaptError):
    pass


class NumericError(RisAdaptError, ArithmeticError):
    pass


class ProbeMismatchError(RisAdaptError):
    """A sensing model is used with a probe set it was not trained on."""
