"""Exception hierarchy shared by every module."""


class MPLabError(Exception):
    """Base class for all errors raised by mplab."""


class InvalidDimensionError(MPLabError, ValueError):
    pass


class InvalidSpectrumError(MPLabError, ValueError):
    pass


class InvalidParameterError(MPLabError, ValueError):
    pass


class InvalidInputError(MPLabError, ValueError):
    pass


class InvalidStateError(MPLabError, ValueError):
    pass


class NumericalFailureError(MPLabError, ArithmeticError):
    pass


class InsufficientMomentsError(MPLabError, ValueError):
    """Raised when a computation needs moments beyond the available order."""

    def __init__(self, required, available):
        self.required = required
        self.available = available
        super().__init__(
            f"moments through order {required} required, "
            f"only {available} available")


class MomentSequenceInvalidError(MPLabError, ValueError):
    """The Hankel matrix of the moment sequence is not positive definite."""


class SimulationDivergedError(MPLabError, ArithmeticError):
    """A non-finite value appeared inside an error-model simulation.

    The partially advanced state is attached as ``state``.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
