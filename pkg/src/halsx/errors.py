"""Exception types shared across the package."""


class HalsxError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatchError(HalsxError, ValueError):
    """An array does not have the shape required by the operation."""


class InfeasibleMeasurementsError(HalsxError, ValueError):
    """Measurements are incompatible with the nonnegativity constraint,
    e.g. a negative value under a mask that forces nonnegative entries."""


class ProjectionConvergenceError(HalsxError, RuntimeError):
    """Alternating projection stalled before reaching the residual
    tolerance. Carries the last measurement residual for diagnostics."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class RankDeficientFeaturesError(HalsxError, ValueError):
    """A feature matrix does not have full column rank."""


class DegenerateColumnError(HalsxError, ValueError):
    """A factor column paired with the current update is identically zero;
    the solver handles this with its epsilon rule."""


class NoSideInformationError(HalsxError, ValueError):
    """Prediction for unseen rows/columns requested from a model fitted
    with identity features."""


class DivergenceError(HalsxError, RuntimeError):
    """The sampling-error solver increased its objective over several
    consecutive iterations. Carries the partial model for inspection."""

    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model
