"""Bilinear/trilinear sampling and slice/volume resampling.

Out-of-bounds samples read as 0 (background): tissue photographs are
masked onto black, so zero extension is the physically consistent choice.
All sampling routines also expose the spatial gradient of the interpolant
at the sample points, which is what the registration objectives chain
through.
"""

import numpy as np

from .errors import DegenerateTransformError
from .grids import Grid3D, Image2D, Mask2D, Volume3D
from .transforms import Affine2D, Rigid3DScale


def _gather2(values: np.ndarray, iy: np.ndarray, ix: np.ndarray) -> np.ndarray:
    """values[iy, ix] with zero padding outside the raster."""
    h, w = values.shape[:2]
    inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.zeros(iy.shape + values.shape[2:], dtype=np.float64)
    if np.any(inside):
        out[inside] = values[iy[inside], ix[inside]]
    return out


def sample_bilinear(values: np.ndarray, x: np.ndarray, y: np.ndarray,
                    with_grad: bool = False):
    """Bilinear sample of a (H, W) or (H, W, C) raster at pixel coords (x, y).

    x is the column coordinate, y the row coordinate. Returns the sampled
    values, plus (d/dx, d/dy) when `with_grad` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    v00 = _gather2(values, y0, x0)
    v01 = _gather2(values, y0, x0 + 1)
    v10 = _gather2(values, y0 + 1, x0)
    v11 = _gather2(values, y0 + 1, x0 + 1)
    if values.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    out = top + fy * (bot - top)
    if not with_grad:
        return out
    gx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    gy = bot - top
    return out, gx, gy


def _gather3(values: np.ndarray, i: np.ndarray, j: np.ndarray, k: np.ndarray) -> np.ndarray:
    n0, n1, n2 = values.shape[:3]
    inside = (i >= 0) & (i < n0) & (j >= 0) & (j < n1) & (k >= 0) & (k < n2)
    out = np.zeros(i.shape + values.shape[3:], dtype=np.float64)
    if np.any(inside):
        out[inside] = values[i[inside], j[inside], k[inside]]
    return out


def sample_trilinear(values: np.ndarray, pts: np.ndarray, with_grad: bool = False):
    """Trilinear sample of a (n0, n1, n2[, C]) raster at index coords (N, 3).

    Returns sampled values (N[, C]); with `with_grad`, also the spatial
    gradient (N, 3[, C]) of the interpolant in index units.
    """
    pts = np.asarray(pts, dtype=np.float64)
    p0 = np.floor(pts).astype(np.int64)
    f = pts - p0
    i0, j0, k0 = p0[:, 0], p0[:, 1], p0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    if values.ndim == 4:
        fx = fx[:, None]
        fy = fy[:, None]
        fz = fz[:, None]

    c000 = _gather3(values, i0, j0, k0)
    c100 = _gather3(values, i0 + 1, j0, k0)
    c010 = _gather3(values, i0, j0 + 1, k0)
    c110 = _gather3(values, i0 + 1, j0 + 1, k0)
    c001 = _gather3(values, i0, j0, k0 + 1)
    c101 = _gather3(values, i0 + 1, j0, k0 + 1)
    c011 = _gather3(values, i0, j0 + 1, k0 + 1)
    c111 = _gather3(values, i0 + 1, j0 + 1, k0 + 1)

    c00 = c000 + fx * (c100 - c000)
    c01 = c001 + fx * (c101 - c001)
    c10 = c010 + fx * (c110 - c010)
    c11 = c011 + fx * (c111 - c011)
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    out = c0 + fz * (c1 - c0)
    if not with_grad:
        return out

    gx0 = (c100 - c000) + fy * ((c110 - c010) - (c100 - c000))
    gx1 = (c101 - c001) + fy * ((c111 - c011) - (c101 - c001))
    gx = gx0 + fz * (gx1 - gx0)
    gy = (c10 - c00) + fz * ((c11 - c01) - (c10 - c00))
    gz = c1 - c0
    grad = np.stack([gx, gy, gz], axis=1)
    return out, grad


def grid_pixel_coords(height: int, width: int):
    """(x, y) pixel coordinate arrays, shape (H, W) each (x = col, y = row)."""
    y, x = np.meshgrid(
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    return x, y


def resample_slice(src, t: Affine2D, out_shape=None, out_pixel_size=None):
    """Resample a slice (Image2D or Mask2D) through an Affine2D.

    `t` maps output pixel coordinates to source pixel coordinates. Output
    grid defaults to the source grid; coordinates falling outside the
    source read as 0. Masks stay within [0, 1].
    """
    if abs(t.det) < 1e-12:
        raise DegenerateTransformError("cannot resample through a singular affine")
    if out_shape is None:
        out_shape = src.values.shape[:2]
    if out_pixel_size is None:
        out_pixel_size = src.pixel_size
    h, w = int(out_shape[0]), int(out_shape[1])
    x, y = grid_pixel_coords(h, w)
    pts = t.apply(np.stack([x.ravel(), y.ravel()], axis=1))
    vals = sample_bilinear(src.values, pts[:, 0], pts[:, 1])
    if isinstance(src, Mask2D):
        return Mask2D(np.clip(vals.reshape(h, w), 0.0, 1.0), out_pixel_size)
    return Image2D(vals.reshape(h, w, src.channels), out_pixel_size)


def resample_volume(src: Volume3D, t: Rigid3DScale, out_grid: Grid3D) -> Volume3D:
    """Resample a volume through a Rigid3DScale pose onto `out_grid`.

    The pose is the forward placement of the source content: z_scale is
    applied to the sampling coordinate along the stacking axis first, so
    z_scale = 2 halves the occupied extent of the output.
    """
    world = out_grid.world_coords().reshape(-1, 3)
    src_world = t.sampling_points(world)
    w2g = np.linalg.inv(src.grid_to_world)
    src_idx = src_world @ w2g[:3, :3].T + w2g[:3, 3]
    vals = sample_trilinear(src.values, src_idx)
    shape = out_grid.dims if src.values.ndim == 3 else out_grid.dims + (src.values.shape[3],)
    return Volume3D(vals.reshape(shape), out_grid.voxel_size, out_grid.grid_to_world)
