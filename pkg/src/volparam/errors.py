"""Exception hierarchy shared across the package."""


class VolParamError(Exception):
    """Base class for all package errors."""


class DomainError(VolParamError, ValueError):
    """A parameter value lies outside the unit cube (or the knot range)."""


class KnotVectorError(VolParamError, ValueError):
    """Malformed knot vector: not open, not monotone, or bad multiplicities."""


class CompatibilityError(VolParamError, ValueError):
    """Boundary faces do not match the volume skeleton or each other."""


class RationalInputError(VolParamError, ValueError):
    """Input carries rational weights; only polynomial B-splines are accepted."""


class DegenerateBoundaryError(VolParamError, ValueError):
    """The Jacobian vanishes identically on a boundary face of some cell."""


class ModelFileError(VolParamError, ValueError):
    """Model file could not be parsed or validated."""


class NotSPDError(VolParamError, ArithmeticError):
    """A conjugate-gradient breakdown revealed a non-SPD operator."""


class ConvergenceError(VolParamError, RuntimeError):
    """An iterative method ran out of iterations."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InfeasibleError(VolParamError, RuntimeError):
    """No strictly feasible point was found for a constrained subproblem."""

    def __init__(self, message, worst_constraints=(), best_value=None):
        super().__init__(message)
        self.worst_constraints = list(worst_constraints)
        self.best_value = best_value


class RefinementLimitError(VolParamError, RuntimeError):
    """Local offset refinement exhausted its round budget."""


class NotCertifiedError(VolParamError, ValueError):
    """An operation that requires a certified-bijective volume got one that is not."""
