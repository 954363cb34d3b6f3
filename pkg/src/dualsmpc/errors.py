"""Exception types raised by the library."""


class InvalidArgumentError(ValueError):
    """Inputs violate a documented precondition (shapes, ranges, combos)."""


class UnknownModeError(KeyError):
    """A mode label is not part of the behavior model's mode set."""


class OptimizationFailureError(RuntimeError):
    """An iterative maximization did not converge.

    Carries the last iterate so callers can inspect or reuse it.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class DegenerateModelError(RuntimeError):
    """A Q-value Hessian is singular or indefinite at its maximizer."""


class DegenerateLikelihoodError(RuntimeError):
    """A likelihood covariance is singular; the Bayes update is undefined."""


class DegenerateCovarianceError(RuntimeError):
    """A covariance that must be PSD is not."""


class DegenerateNormalError(RuntimeError):
    """Two consecutive nominal states coincide; no halfspace normal exists."""


class NumericalFailureError(RuntimeError):
    """NaN or Inf appeared in solver derivatives."""
