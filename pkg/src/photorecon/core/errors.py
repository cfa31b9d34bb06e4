"""Exception types shared across the package."""


class PhotoReconError(Exception):
    """Base class for all package errors."""


class GridMismatchError(PhotoReconError):
    """Two rasters that must share a grid do not."""


class EmptyMaskError(PhotoReconError):
    """A mask with zero total mass where mass is required."""


class DegenerateTransformError(PhotoReconError):
    """A transform whose linear part is singular."""


class DegenerateLandmarksError(PhotoReconError):
    """Calibration landmarks are collinear (or nearly so)."""


class AmbiguousSeedError(PhotoReconError):
    """Seed click landed in the background component; operator must re-click."""


class DegenerateOverlapError(PhotoReconError):
    """Reference volume falls entirely outside the stack grid."""


class UnsupportedFormatError(PhotoReconError):
    """File format outside the supported NIfTI-1 subset."""


class StaleProductError(PhotoReconError):
    """A pipeline stage's upstream product is missing or out of date."""
