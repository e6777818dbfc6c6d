"""Exception hierarchy for gasket_plap."""


class GasketPlapError(Exception):
    """Base class for all library errors."""


class CapacityError(GasketPlapError, ValueError):
    """Requested level does not fit the cell index type."""


class DimensionError(GasketPlapError, ValueError):
    """Level or length mismatch between a function and a graph."""


class SpecError(GasketPlapError, ValueError):
    """Problem constants violate the exponent ordering or positivity."""


class DegenerateInputError(GasketPlapError, ValueError):
    """Input is excluded from the domain (e.g. the zero function)."""


class ConvergenceError(GasketPlapError, RuntimeError):
    """An iterative solve hit its iteration cap.

    ``achieved`` holds the last measured stopping quantity (gradient norm,
    ratio gap, ...) so callers can decide how bad it was.
    """

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class ProjectionUnavailable(GasketPlapError):
    """A direction has no admissible fibering root for the requested branch."""

    def __init__(self, message, case=None, regime=None):
        super().__init__(message)
        self.case = case
        self.regime = regime


class InfeasibleError(GasketPlapError):
    """No admissible direction was found for a constrained minimization."""


class PreconditionError(GasketPlapError, ValueError):
    """A documented precondition on lambda (or similar) does not hold."""
