"""Exception hierarchy shared by all modules."""


class SpdeCtlError(Exception):
    """Base class for every error raised by the package."""


class InvalidParameterError(SpdeCtlError, ValueError):
    """A constructor or operation received a parameter outside its domain."""


class DimensionMismatchError(SpdeCtlError, ValueError):
    """Coefficient vectors or sample arrays do not match the space."""


class OperatorEvaluationError(SpdeCtlError, FloatingPointError):
    """An operator produced a non-finite value.

    Carries the evaluation time, the H-norm of the offending state and,
    for quadrature-based operators, the node where the integrand blew up.
    """

    def __init__(self, message, t=None, h_norm=None, node=None):
        super().__init__(message)
        self.t = t
        self.h_norm = h_norm
        self.node = node


class DivergenceError(SpdeCtlError, FloatingPointError):
    """A time step produced non-finite state, or too many paths diverged."""

    def __init__(self, message, t=None, h_norm=None, fraction=None):
        super().__init__(message)
        self.t = t
        self.h_norm = h_norm
        self.fraction = fraction


class ContractError(SpdeCtlError, ValueError):
    """Two objects that must share a grid or a noise record do not."""


class OptimizationError(SpdeCtlError, RuntimeError):
    """Every candidate evaluated by the optimizer diverged."""


class ConfigError(SpdeCtlError, ValueError):
    """Experiment configuration failed to parse or validate."""
