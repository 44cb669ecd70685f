"""Exception types shared across the package."""


class FracwaveError(Exception):
    """Base class for all package errors."""


class OddPointCountError(FracwaveError):
    """Grid point count must be even (DFT symmetry convention) and >= 8."""


class OverlapError(FracwaveError):
    """Closures of the interior region and an observation window intersect."""


class EmptySetError(FracwaveError):
    """An interval captured no grid node."""


class SupportError(FracwaveError):
    """A field violates its declared spatial or temporal support."""


class MeshError(FracwaveError):
    """Extension mesh too coarse."""


class NonSymmetricError(FracwaveError):
    """Operator matrix failed its symmetry invariant."""


class NegativeModeError(FracwaveError):
    """Stiffness matrix has a non-positive eigenvalue; cosine propagator unusable."""


class ConditioningError(FracwaveError):
    """Dictionary Gram matrix too ill-conditioned to orthonormalize."""


class ResolutionError(FracwaveError):
    """Bump width not resolvable on the grid."""


class ConfigError(FracwaveError):
    """Invalid or unknown configuration content."""


class CacheCorruptionError(FracwaveError):
    """Cache entry failed its integrity check."""


class AssertionFailure(FracwaveError):
    """A named runtime assertion embedded in an experiment failed."""

    def __init__(self, name, value, bound, message=""):
        self.name = name
        self.value = value
        self.bound = bound
        text = f"{name}: value {value!r} violates bound {bound!r}"
        if message:
            text += f" ({message})"
        super().__init__(text)
