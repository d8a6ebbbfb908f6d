"""Exception hierarchy shared by all photoclick modules."""


class PhotoclickError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class UsageError(PhotoclickError):
    exit_code = 2


class InvalidDimensionError(UsageError, ValueError):
    pass


class InvalidRateError(UsageError, ValueError):
    pass


class InconsistentEfficiencyError(UsageError, ValueError):
    pass


class UnsupportedModelError(UsageError, ValueError):
    pass


class InvalidRecordError(UsageError, ValueError):
    pass


class ShapeError(UsageError, ValueError):
    pass


class GridMismatchError(UsageError, ValueError):
    pass


class CompatibilityError(UsageError, ValueError):
    """Metadata of two artifacts (library, model, record) disagree."""


class NumericsError(PhotoclickError, ArithmeticError):
    pass


class NonUniqueSteadyStateError(NumericsError):
    pass


class TruncationError(NumericsError):
    """Fock truncation too small for the populations reached."""

    def __init__(self, message, leakage=None):
        super().__init__(message)
        self.leakage = leakage


class SimulationTimeout(NumericsError):
    """A trajectory exhausted its step or simulated-time budget."""

    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = theta


class NoJumpPossibleError(NumericsError):
    pass


class DegeneratePosteriorError(NumericsError):
    pass


class EmptyAcceptanceError(NumericsError):
    pass


class TrainingDivergedError(NumericsError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
