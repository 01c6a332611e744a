"""Exception types shared across the package.

Every error raised by the library derives from ``LaplaceMhError`` so callers
can catch the whole family at once.  The CLI maps subfamilies to exit codes.
"""


class LaplaceMhError(Exception):
    """Base class for all package errors."""


class ConfigError(LaplaceMhError):
    """Invalid configuration or argument combination."""


class DataError(LaplaceMhError):
    """Problem with input data files."""


class NumericalError(LaplaceMhError):
    """Numerical failure during fitting."""


# -- linear algebra ---------------------------------------------------------

class NotPositiveDefinite(NumericalError):
    """Factorization hit a pivot at or below tolerance."""


class DimensionMismatch(ConfigError):
    """Operands have incompatible shapes."""


class NonConvergence(NumericalError):
    """Iterative eigenvalue routine failed to converge."""


class OutOfSupport(ConfigError):
    """Parameter value outside the valid support."""


class IndefiniteStructure(ConfigError):
    """Structure matrix fails a definiteness requirement."""


# -- graphs -----------------------------------------------------------------

class GalParseError(DataError):
    """Malformed GAL file; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class AsymmetryError(DataError):
    """Neighbor relation is not symmetric."""


class IslandError(ConfigError):
    """Region without neighbors where a connected structure is required."""


class OutOfRange(ConfigError):
    """Scalar parameter outside its admissible interval."""


class UnsupportedFamily(ConfigError):
    """Observation family not implemented."""


# -- fitting ----------------------------------------------------------------

class NonFiniteValue(NumericalError):
    """A quantity that must be finite is NaN or infinite."""


class NewtonDivergence(NumericalError):
    """Inner Newton optimization failed to make progress."""


class ModeSearchFailure(NumericalError):
    """Hyperparameter mode search did not produce a usable curvature."""


class GridOverflow(ConfigError):
    """More free hyperparameters than the factorial grid supports."""


class IndexNotTracked(ConfigError):
    """Requested latent index was not tracked at fit time."""


class EmptyChain(ConfigError):
    """Chain has no kept draws."""


# -- marginals --------------------------------------------------------------

class EmptyList(ConfigError):
    """Operation requires at least one input grid."""


class Unnormalized(ConfigError):
    """Marginal grid does not integrate to one."""


class ZeroScale(ConfigError):
    """Affine transform with zero scale."""


class CovariateNotFound(ConfigError):
    """Named covariate absent from the model."""


class NonPositiveDelta(ConfigError):
    """Shared-component weight must be strictly positive."""


class NameMismatch(ConfigError):
    """Two result sets share no parameter names."""


class GridTooCoarse(NumericalError):
    """Quadrature grid refinement failed to stabilize."""
