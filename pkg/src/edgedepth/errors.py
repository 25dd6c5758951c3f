"""Exception types shared across the package."""


class EdgeDepthError(Exception):
    """Base class for all package-specific errors."""


class PointBehindCamera(EdgeDepthError):
    """A keypoint projected to non-positive depth."""


class DegenerateEdge(EdgeDepthError):
    """Both pair-depth denominators are exactly zero (coincident rays)."""


class TooFewKeypoints(EdgeDepthError):
    """At least two keypoints are required to form an edge."""


class NoValidCandidates(EdgeDepthError):
    """Masking removed every depth candidate."""


class ShapeMismatch(EdgeDepthError):
    """Array arguments have incompatible shapes."""


class NonFiniteGradient(EdgeDepthError):
    """An optimizer step received NaN or infinite gradients."""


class NonFiniteLoss(EdgeDepthError):
    """Training produced a NaN or infinite loss."""


class NonPositiveSigma(EdgeDepthError):
    """Uncertainty weighting requires strictly positive scales."""


class UnprojectableInstance(EdgeDepthError):
    """Pose sampling failed to place every keypoint in front of the camera."""


class ParseError(EdgeDepthError):
    """A dataset or checkpoint file is malformed.

    Carries the 1-based line number when the source is line-oriented.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IncompatibleCheckpoint(EdgeDepthError):
    """A checkpoint does not match the requested configuration."""
