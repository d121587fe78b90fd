"""Exception hierarchy shared by all modules."""


class RadialSopfError(Exception):
    """Base class for every error raised by the package."""


class ParseError(RadialSopfError):
    pass


class StructureError(RadialSopfError):
    """Cycle, disconnected bus, duplicate id or several roots."""


class DomainError(RadialSopfError):
    """A field lies outside its admissible range."""


class UnknownBus(RadialSopfError, KeyError):
    pass


class InvalidWindow(RadialSopfError, ValueError):
    pass


class ProfileLengthMismatch(RadialSopfError, ValueError):
    pass


class InconsistentInstance(RadialSopfError):
    pass


class LengthMismatch(RadialSopfError, ValueError):
    pass


class DimensionError(RadialSopfError, ValueError):
    pass


class BackendUnavailable(RadialSopfError):
    pass


class NonpositiveVoltage(RadialSopfError, ArithmeticError):
    pass


class NotFeasibleInput(RadialSopfError):
    pass


class NoConvergence(RadialSopfError):
    """Raised when the sweep exhausts ``max_iter``; ``state`` holds the last iterate."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class MonotonicityViolation(RadialSopfError):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class InfeasibleLP(RadialSopfError):
    pass


class ShapeMismatch(RadialSopfError, ValueError):
    pass


class GapOrderError(RadialSopfError, ValueError):
    """The restricted value lies below the relaxed one by more than the tolerance."""
