"""Exception types shared across the package."""


class SphereProjError(Exception):
    """Base class for all errors raised by this package."""


class OutOfDomain(SphereProjError, ValueError):
    pass


class EmptyMesh(SphereProjError, ValueError):
    pass


class DegenerateTriangle(SphereProjError, ValueError):
    pass


class InvalidNside(SphereProjError, ValueError):
    pass


class ConfigMismatch(SphereProjError, ValueError):
    pass


class TapeReplayMismatch(SphereProjError, RuntimeError):
    pass


class ShapeMismatch(SphereProjError, ValueError):
    pass


class GridMismatch(SphereProjError, ValueError):
    pass


class DimMismatch(SphereProjError, ValueError):
    pass


class EmptyInput(SphereProjError, ValueError):
    pass


class NonPositiveSigma(SphereProjError, ValueError):
    pass


class SizeMismatch(SphereProjError, ValueError):
    pass


class EmptySet(SphereProjError, ValueError):
    pass


class SurfaceVanished(SphereProjError, RuntimeError):
    """Raised when an optimization step extracts an empty surface.

    The partial trace is attached as ``trace`` and the last valid grid as
    ``grid`` so callers can still inspect the run.
    """

    def __init__(self, message, trace=None, grid=None):
        super().__init__(message)
        self.trace = trace
        self.grid = grid
