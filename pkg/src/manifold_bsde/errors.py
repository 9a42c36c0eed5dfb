"""Exception hierarchy shared by all modules."""


class ManifoldBsdeError(Exception):
    """Base class for every error raised by the package."""


class DomainError(ManifoldBsdeError, ValueError):
    """An argument lies outside the domain where the operation is defined."""


class NumericalError(ManifoldBsdeError, ArithmeticError):
    """Non-finite values, singular matrices and similar breakdowns."""


class EscapeError(ManifoldBsdeError):
    """An integrated trajectory left the chart domain.

    ``exit_time`` is the first integration time at which the state was found
    outside the chart.
    """

    def __init__(self, message, exit_time=None):
        super().__init__(message)
        self.exit_time = exit_time


class ConvergenceError(ManifoldBsdeError):
    """An iterative method stopped before reaching its tolerance."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals) if residuals is not None else []


class AmbiguityError(ManifoldBsdeError):
    """The requested object is not unique (e.g. antipodal points on a sphere)."""


class RegistryError(ManifoldBsdeError, KeyError):
    """Unknown name passed to a registry lookup."""


class BasisError(ManifoldBsdeError):
    """Regression design matrix is rank deficient."""


class ReliabilityError(ManifoldBsdeError):
    """A Monte-Carlo estimate is too biased to be reported."""


class UnsupportedError(ManifoldBsdeError, NotImplementedError):
    """The operation is not available for this configuration."""


class ConfigError(ManifoldBsdeError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending path."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
