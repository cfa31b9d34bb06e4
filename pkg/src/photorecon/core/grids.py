"""Raster containers for 2D slices and 3D volumes.

Conventions used throughout the package:

* 2D rasters are numpy arrays indexed ``(row, col)`` or ``(row, col, channel)``.
  In-plane physical coordinates are ``x = col * pixel_size``,
  ``y = row * pixel_size`` (mm), origin at the centre of pixel (0, 0).
* 3D volumes are indexed ``(ix, iy, iz)`` or ``(ix, iy, iz, channel)`` and
  carry a 4x4 ``grid_to_world`` affine mapping voxel indices to world mm.
  Axis 2 (``iz``) is the slice-stacking axis.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMaskError, GridMismatchError

_VALUE_SLACK = 1e-9  # tolerance for [0,1] mask range checks


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass
class Image2D:
    """A single calibrated photograph (or derived raster).

    values : (H, W) or (H, W, C) float array, C in {1, 3}
    pixel_size : isotropic in-plane pixel size, mm
    """

    values: np.ndarray
    pixel_size: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3 or self.values.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W) or (H, W, 1|3) values, got {self.values.shape}")
        if self.pixel_size <= 0:
            raise ValueError("pixel_size must be positive")
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        _check_finite(self.values, "image")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def same_grid(self, other) -> bool:
        return (
            self.values.shape[:2] == other.values.shape[:2]
            and abs(self.pixel_size - other.pixel_size) < 1e-12
        )


@dataclass
class Mask2D:
    """A per-slice foreground mask; values in [0, 1] (soft after resampling)."""

    values: np.ndarray
    pixel_size: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"mask values must be 2D, got shape {self.values.shape}")
        if self.pixel_size <= 0:
            raise ValueError("pixel_size must be positive")
        _check_finite(self.values, "mask")
        lo, hi = self.values.min(initial=0.0), self.values.max(initial=0.0)
        if lo < -_VALUE_SLACK or hi > 1.0 + _VALUE_SLACK:
            raise ValueError(f"mask values outside [0,1]: range [{lo}, {hi}]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def same_grid(self, other) -> bool:
        return (
            self.values.shape[:2] == other.values.shape[:2]
            and abs(self.pixel_size - other.pixel_size) < 1e-12
        )


@dataclass(frozen=True)
class Grid3D:
    """Sampling-grid specification for a 3D volume."""

    dims: tuple
    voxel_size: tuple
    grid_to_world: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"bad dims {self.dims}")
        if len(self.voxel_size) != 3 or any(v <= 0 for v in self.voxel_size):
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        g2w = self.grid_to_world
        if g2w is None:
            g2w = np.diag(list(self.voxel_size) + [1.0])
        g2w = np.asarray(g2w, dtype=np.float64)
        if g2w.shape != (4, 4):
            raise ValueError("grid_to_world must be 4x4")
        if abs(np.linalg.det(g2w)) < 1e-15:
            raise ValueError("grid_to_world must be invertible")
        object.__setattr__(self, "grid_to_world", g2w)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))

    @staticmethod
    def centered(dims, voxel_size) -> "Grid3D":
        """Grid whose world origin sits at the geometric centre of the volume."""
        dims = tuple(int(d) for d in dims)
        vs = tuple(float(v) for v in voxel_size)
        g2w = np.diag(list(vs) + [1.0])
        g2w[:3, 3] = [-(d - 1) / 2.0 * v for d, v in zip(dims, vs)]
        return Grid3D(dims, vs, g2w)

    def world_coords(self) -> np.ndarray:
        """World coordinates of every voxel centre, shape (*dims, 3)."""
        ix, iy, iz = np.meshgrid(
            np.arange(self.dims[0]), np.arange(self.dims[1]), np.arange(self.dims[2]),
            indexing="ij",
        )
        idx = np.stack([ix, iy, iz], axis=-1).astype(np.float64)
        return idx @ self.grid_to_world[:3, :3].T + self.grid_to_world[:3, 3]


@dataclass
class Volume3D:
    """A 3D raster (scalar, RGB or K-channel) with world geometry."""

    values: np.ndarray
    voxel_size: tuple
    grid_to_world: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim == 3:
            pass
        elif self.values.ndim == 4:
            pass
        else:
            raise ValueError(f"volume values must be 3D or 4D, got {self.values.shape}")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if any(v <= 0 for v in self.voxel_size):
            raise ValueError("voxel_size components must be positive")
        if self.grid_to_world is None:
            self.grid_to_world = np.diag(list(self.voxel_size) + [1.0])
        self.grid_to_world = np.asarray(self.grid_to_world, dtype=np.float64)
        if self.grid_to_world.shape != (4, 4) or abs(np.linalg.det(self.grid_to_world)) < 1e-15:
            raise ValueError("grid_to_world must be an invertible 4x4 affine")
        _check_finite(self.values, "volume")

    @property
    def dims(self) -> tuple:
        return self.values.shape[:3]

    @property
    def channels(self) -> int:
        return 1 if self.values.ndim == 3 else self.values.shape[3]

    @property
    def grid(self) -> Grid3D:
        return Grid3D(self.dims, self.voxel_size, self.grid_to_world)

    def same_grid(self, other) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.voxel_size, other.voxel_size, atol=1e-12)
            and np.allclose(self.grid_to_world, other.grid_to_world, atol=1e-9)
        )


def center_of_gravity(m) -> np.ndarray:
    """Intensity-weighted mean coordinate of a mask, in physical units.

    Accepts a Mask2D (returns (x_mm, y_mm)) or a Volume3D (returns world
    (x, y, z) mm via its grid_to_world). Raises EmptyMaskError when the
    total mass is zero.
    """
    if isinstance(m, Mask2D):
        v = m.values
        total = v.sum(dtype=np.float64)
        if total <= 0:
            raise EmptyMaskError("cannot compute COG of an empty mask")
        rows = np.arange(v.shape[0], dtype=np.float64)
        cols = np.arange(v.shape[1], dtype=np.float64)
        cy = (v.sum(axis=1) @ rows) / total
        cx = (v.sum(axis=0) @ cols) / total
        return np.array([cx * m.pixel_size, cy * m.pixel_size])
    if isinstance(m, Volume3D):
        v = m.values if m.values.ndim == 3 else m.values[..., 0]
        total = v.sum(dtype=np.float64)
        if total <= 0:
            raise EmptyMaskError("cannot compute COG of an empty volume")
        idx = np.empty(3)
        for ax in range(3):
            coords = np.arange(v.shape[ax], dtype=np.float64)
            axes = tuple(a for a in range(3) if a != ax)
            idx[ax] = (v.sum(axis=axes) @ coords) / total
        return m.grid_to_world[:3, :3] @ idx + m.grid_to_world[:3, 3]
    raise TypeError(f"unsupported type {type(m)}")


def _pad_to_multiple(a: np.ndarray, factor: int, axes) -> np.ndarray:
    pads = [(0, 0)] * a.ndim
    needed = False
    for ax in axes:
        rem = a.shape[ax] % factor
        if rem:
            pads[ax] = (0, factor - rem)
            needed = True
    return np.pad(a, pads, mode="constant") if needed else a


def block_mean_2d(a: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter downsample of the first two axes by an integer factor.

    Partial edge blocks are zero-padded before averaging (background is 0).
    """
    if factor == 1:
        return a.copy()
    a = _pad_to_multiple(a, factor, (0, 1))
    h, w = a.shape[0] // factor, a.shape[1] // factor
    a = a.reshape((h, factor, w, factor) + a.shape[2:])
    return a.mean(axis=(1, 3))


def block_mean_3d(a: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter downsample of the first three axes by an integer factor."""
    if factor == 1:
        return a.copy()
    a = _pad_to_multiple(a, factor, (0, 1, 2))
    n0, n1, n2 = (a.shape[i] // factor for i in range(3))
    a = a.reshape((n0, factor, n1, factor, n2, factor) + a.shape[3:])
    return a.mean(axis=(1, 3, 5))


def downsample_image(img, factor: int):
    """Downsample an Image2D or Mask2D in-plane by an integer factor.

    The scaled grid's pixel i covers source pixels [f*i, f*i + f), so the
    scaled pixel centre sits at source-pixel coordinate f*i + (f-1)/2.
    """
    cls = type(img)
    vals = block_mean_2d(img.values, factor)
    if cls is Mask2D:
        vals = np.clip(vals, 0.0, 1.0)
    return cls(vals, img.pixel_size * factor)


def downsample_volume(vol: Volume3D, factor: int) -> Volume3D:
    """Downsample a Volume3D along all three axes by an integer factor."""
    if factor == 1:
        return Volume3D(vol.values.copy(), vol.voxel_size, vol.grid_to_world.copy())
    vals = block_mean_3d(vol.values, factor)
    g2w = vol.grid_to_world.copy()
    # new voxel centre i sits at old index f*i + (f-1)/2
    g2w[:3, 3] = g2w[:3, 3] + g2w[:3, :3] @ np.full(3, (factor - 1) / 2.0)
    g2w[:3, :3] = g2w[:3, :3] * factor
    vs = tuple(v * factor for v in vol.voxel_size)
    return Volume3D(vals, vs, g2w)


def require_same_grid(a, b) -> None:
    if not a.same_grid(b):
        raise GridMismatchError(
            f"grid mismatch: {getattr(a, 'values').shape} vs {getattr(b, 'values').shape}"
        )
