"""Exception types shared across the package."""


class FkedError(Exception):
    """Base class for all package-specific errors."""


class DomainError(FkedError, ValueError):
    """An argument lies outside the curve domain or violates a geometric precondition."""


class BasisMismatchError(FkedError, ValueError):
    """Two functional objects do not share a compatible basis or grid."""


class IllPosedFitError(FkedError, RuntimeError):
    """A least-squares problem is rank deficient or otherwise unsolvable."""


class SelectionError(FkedError, RuntimeError):
    """No admissible candidate survived a model-selection sweep."""


class VariogramFitError(FkedError, RuntimeError):
    """Parametric variogram fitting failed for every candidate family."""


class ConditioningError(FkedError, RuntimeError):
    """A covariance matrix stayed non positive definite after the jitter budget."""


class BootstrapError(FkedError, RuntimeError):
    """Too many bootstrap replicates failed to refit."""
