"""Exception types shared across the package."""


class ContractViolationError(ValueError):
    """An argument violates a documented structural precondition (shape, dimension, range)."""


class DomainError(ValueError):
    """A numerically invalid input (non-finite value, empty data, infinite KL term)."""


class UnsupportedOperationError(RuntimeError):
    """The operation is not defined for this loss kind (e.g. subgradients of a 0-1 type loss)."""


class InitializationError(RuntimeError):
    """A sampler could not start (non-finite log density at the initial point)."""


class SingularHessianError(RuntimeError):
    """The risk Hessian is singular and cannot be inverted."""


class DegeneratePosteriorError(RuntimeError):
    """Posterior draws are degenerate (singular sample covariance)."""


class IntegrabilityError(ValueError):
    """A flat prior was requested but the empirical risk does not grow along every ray."""
