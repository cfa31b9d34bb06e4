"""Grids, transforms, resampling, metrics and the shared optimizer."""

from .errors import (
    AmbiguousSeedError,
    DegenerateLandmarksError,
    DegenerateOverlapError,
    DegenerateTransformError,
    EmptyMaskError,
    GridMismatchError,
    PhotoReconError,
    StaleProductError,
    UnsupportedFormatError,
)
from .grids import (
    Grid3D,
    Image2D,
    Mask2D,
    Volume3D,
    block_mean_2d,
    block_mean_3d,
    center_of_gravity,
    downsample_image,
    downsample_volume,
)
from .metrics import (
    DICE_EPS,
    VAR_EPS,
    log_area_penalty,
    log_area_penalty_with_grad,
    ncc,
    ncc_with_partials,
    soft_dice,
    soft_dice_with_partials,
)
from .optim import OptimResult, minimize_lbfgs
from .resample import (
    grid_pixel_coords,
    resample_slice,
    resample_volume,
    sample_bilinear,
    sample_trilinear,
)
from .transforms import Affine2D, Rigid3DScale, affine_at_scale, rotation_matrices

__all__ = [
    "Affine2D",
    "AmbiguousSeedError",
    "DegenerateLandmarksError",
    "DegenerateOverlapError",
    "DegenerateTransformError",
    "DICE_EPS",
    "EmptyMaskError",
    "Grid3D",
    "GridMismatchError",
    "Image2D",
    "Mask2D",
    "OptimResult",
    "PhotoReconError",
    "Rigid3DScale",
    "StaleProductError",
    "UnsupportedFormatError",
    "VAR_EPS",
    "Volume3D",
    "affine_at_scale",
    "block_mean_2d",
    "block_mean_3d",
    "center_of_gravity",
    "downsample_image",
    "downsample_volume",
    "grid_pixel_coords",
    "log_area_penalty",
    "log_area_penalty_with_grad",
    "minimize_lbfgs",
    "ncc",
    "ncc_with_partials",
    "resample_slice",
    "resample_volume",
    "rotation_matrices",
    "sample_bilinear",
    "sample_trilinear",
    "soft_dice",
    "soft_dice_with_partials",
]
