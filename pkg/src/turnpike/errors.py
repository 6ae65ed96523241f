"""Exception hierarchy shared by all modules."""


class TurnpikeError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(TurnpikeError, ValueError):
    """Bad shapes, non-finite values or out-of-range arguments."""


class ConstraintViolationError(InvalidInputError):
    """A parameter coupling such as ``h * beta < 1`` is violated."""


class ModeNotSupportedError(TurnpikeError):
    """Requested gradient mode cannot be used with the chosen kernel."""


class DegenerateHorizonError(InvalidInputError):
    """A horizon split leaves no steps to work with."""


class DivergenceError(TurnpikeError):
    """The optimizer produced a non-finite objective.

    ``iterate`` holds the last finite control iterate for post-mortem.
    """

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate
