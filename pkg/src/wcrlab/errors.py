"""Exception hierarchy shared across the package."""


class WcrError(Exception):
    """Base class for all package errors."""


class ConfigError(WcrError):
    """Invalid experiment configuration (bad ids, missing seed, empty grids)."""


class DomainError(WcrError):
    """An input lies outside the domain where an operation is defined."""


class NumericError(WcrError):
    """A numerical routine failed to produce a trustworthy result."""


class QuadratureError(NumericError):
    """Adaptive quadrature did not converge.

    Carries the last two panel-count refinements so callers can inspect how
    far apart the iterates were.
    """

    def __init__(self, msg, last_two=None):
        super().__init__(msg)
        self.last_two = last_two


class NonConvergenceError(NumericError):
    """Iterative solver exhausted its iteration budget."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class DegenerateSitesError(WcrError):
    """Duplicate (or otherwise unusable) site configuration."""


class DegenerateConfigurationError(NumericError):
    """Geometry degenerated during a solve (empty-cell deadlock, singular system)."""


class EstimationWindowError(WcrError):
    """No minimizer bracket was found inside the configured search window."""


class DegenerateGradientError(NumericError):
    """Too many replicates produced undefined estimator gradients."""


class DegenerateInformationError(NumericError):
    """A required information-type matrix is singular."""


class PerturbationError(NumericError):
    """A finite-difference probe produced a non-finite estimator value."""

    def __init__(self, msg, index=None):
        super().__init__(msg)
        self.index = index


class IntegrationDivergedError(NumericError):
    """An ODE trajectory left the finite range."""


class HypothesisViolationError(WcrError):
    """A theorem hypothesis required by the requested computation fails."""


class DegenerateBaseError(WcrError):
    """A base distribution is unusable (e.g. zero second moment)."""
