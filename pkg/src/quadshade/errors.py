"""Exception types raised across the package."""


class QuadShadeError(Exception):
    """Base class for all package errors."""


# patch geometry
class ShadowedPoint(QuadShadeError):
    pass


class DegenerateLight(QuadShadeError):
    pass


class DegenerateNormal(QuadShadeError):
    pass


class EqualMagnitudeHessian(QuadShadeError):
    pass


class PlanarShape(QuadShadeError):
    pass


class NotCylinder(QuadShadeError):
    pass


class ShadowViolation(QuadShadeError):
    pass


# proposal inference
class NoFeasibleTheta(QuadShadeError):
    pass


class InfeasibleTheta(QuadShadeError):
    pass


class TooFewPixels(QuadShadeError):
    pass


class ViewAlignedLight(QuadShadeError):
    pass


class ZeroVariance(QuadShadeError):
    pass


# reconstruction
class BoundaryPixel(QuadShadeError):
    pass


class NonConvergence(QuadShadeError):
    pass


# evaluation
class ZeroVector(QuadShadeError):
    pass


class ShapeMismatch(QuadShadeError):
    pass


# io / config
class FormatError(QuadShadeError):
    """Malformed or truncated file."""


class ConfigError(QuadShadeError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
