"""Exception types shared across the package."""


class NotSymmetricError(ValueError):
    """Input matrix is not symmetric within tolerance."""


class NotPositiveDefiniteError(ValueError):
    """Input matrix is not (numerically) positive definite."""


class SeriesConditionError(ArithmeticError):
    """A truncated power series was asked to run outside its safe region.

    ``value`` carries the offending spectral quantity so callers can decide
    whether to raise the truncation order or fall back to an exact routine.
    """

    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class GridError(ValueError):
    """Malformed topology or reference to an unknown bus/branch."""


class SingularGridError(GridError):
    """Reduced admittance matrix is numerically singular (islanded grid)."""
