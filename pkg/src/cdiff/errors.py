"""Exception hierarchy shared across the package."""


class CdiffError(Exception):
    """Base class for all package errors."""


class ConfigError(CdiffError):
    """Invalid user configuration (CLI exit code 2)."""


class NumericalError(CdiffError):
    """A numerical procedure failed (CLI exit code 3)."""


class InfeasiblePointError(CdiffError, ValueError):
    pass


class InfeasibleDomainError(CdiffError, ValueError):
    pass


class UnsupportedDomainError(CdiffError, ValueError):
    pass


class OffSurfaceError(CdiffError, ValueError):
    pass


class NoIntersectionError(NumericalError):
    pass


class StepFailureError(NumericalError):
    pass


class RunawayReflectionError(NumericalError):
    pass


class DegenerateMetricError(NumericalError):
    pass


class DivergenceFailure(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration, loss):
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class EmptyInputError(CdiffError, ValueError):
    pass


class InsufficientSamplesError(CdiffError, ValueError):
    pass


class ModelDomainMismatchError(ConfigError):
    pass
