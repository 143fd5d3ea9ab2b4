"""Exception types raised across the toolkit."""


class DvioError(Exception):
    """Base class for all toolkit errors."""


class NonPositiveDepth(DvioError):
    """Projection/unprojection requested for a point at or behind the camera."""


class DegenerateGeometry(DvioError):
    """Trajectory alignment attempted on too few or collinear points."""


class NonMonotonicTimestamps(DvioError):
    """A timestamped stream is not strictly increasing."""


class ExcessiveGap(DvioError):
    """Gap between consecutive IMU samples exceeds the configured maximum."""


class BiasMismatch(DvioError):
    """Bias differs from the preintegration reference beyond first-order validity."""


class ImageSizeMismatch(DvioError):
    """Two images expected to share dimensions do not."""


class NoCoObservation(DvioError):
    """A windowed residual was requested for a feature with no co-observing frame."""


class InsufficientConstraints(DvioError):
    """The sliding window is under-determined; optimization was skipped."""


class InsufficientSpan(DvioError):
    """Trajectory too short for the requested relative-error delta."""


class AssociationGap(DvioError):
    """Stream association failed: nearest neighbor beyond tolerance."""


class MissingFile(DvioError):
    """A file referenced by a sequence manifest does not exist."""


class DetectionTimeout(DvioError):
    """Detection result for a frame did not arrive within the join window."""


class SpecInvalid(DvioError):
    """Scene or pipeline configuration failed validation."""


class IoFailure(DvioError):
    """Filesystem write failed during export."""
