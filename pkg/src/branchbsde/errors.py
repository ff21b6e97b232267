"""Exception hierarchy shared by all solver modules."""


class BranchBSDEError(Exception):
    """Base class for every error raised by the package."""


class CoefficientDomainError(BranchBSDEError):
    """A coefficient evaluation produced a non-finite value."""


class EllipticityError(BranchBSDEError):
    """The diffusion matrix is singular or below the ellipticity floor."""


class FitError(BranchBSDEError):
    """The driver fit could not be built (non-finite node values, bad mesh)."""


class ExplosionError(BranchBSDEError):
    """A branching tree exceeded the particle cap."""


class EstimatorError(BranchBSDEError):
    """A Monte-Carlo estimate could not be formed."""


class ConfigurationError(BranchBSDEError):
    """Inconsistent run configuration (grids, bounds, missing data)."""


class PriorError(ConfigurationError):
    """The Picard prior violates the bound or Lipschitz requirement."""


class InfeasibleBoundsError(BranchBSDEError):
    """No time step satisfies the a-priori explosion bounds."""


class BoundViolationError(BranchBSDEError):
    """A computed moment or ODE bound was exceeded."""
