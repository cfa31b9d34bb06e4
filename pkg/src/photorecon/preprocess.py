"""Turn raw photographs plus operator annotations into a calibrated slice stack.

Three operator inputs drive this stage: three ruler landmarks per photo
(pixel-size and perspective calibration), one seed click per photo
(foreground masking via a two-component RGB mixture), and a manual slice
order. The output SliceStack places every slice on one padded common grid
with each mask's centre of gravity at the grid centre, which is the layout
the reconstruction optimizer starts from.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import (
    Affine2D,
    AmbiguousSeedError,
    DegenerateLandmarksError,
    EmptyMaskError,
    Image2D,
    Mask2D,
    block_mean_2d,
    center_of_gravity,
    resample_slice,
)

ARCHIVE_RESOLUTION_MM = 0.1
RECON_RESOLUTION_MM = 0.5
SLICE_THICKNESS_MM = 4.0
CLOSING_RADIUS_MM = 0.5  # 5 px at the 0.1 mm archive resolution
PAD_MARGIN = 0.2


@dataclass
class RulerSpec:
    """Metric layout of the three calibration landmarks.

    Segment P0->P1 has length d1_mm, segment P1->P2 length d2_mm, and the
    two segments meet at angle_deg. Default: two 10 mm spacings at a right
    angle.
    """

    d1_mm: float = 10.0
    d2_mm: float = 10.0
    angle_deg: float = 90.0

    def ideal_points(self) -> np.ndarray:
        if self.d1_mm <= 0 or self.d2_mm <= 0:
            raise ValueError("ruler distances must be positive")
        a = math.radians(self.angle_deg)
        p0 = np.array([0.0, 0.0])
        p1 = np.array([self.d1_mm, 0.0])
        p2 = p1 + self.d2_mm * np.array([math.cos(a), math.sin(a)])
        return np.stack([p0, p1, p2])


@dataclass
class LandmarkSet:
    """Three (x, y) pixel points on a raw photograph plus ruler geometry."""

    points: np.ndarray
    ruler: RulerSpec = field(default_factory=RulerSpec)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(3, 2)
        d = self.points
        area = 0.5 * abs(
            (d[1, 0] - d[0, 0]) * (d[2, 1] - d[0, 1])
            - (d[2, 0] - d[0, 0]) * (d[1, 1] - d[0, 1])
        )
        if area <= 1.0:
            raise DegenerateLandmarksError(
                f"landmarks are (near-)collinear: triangle area {area:.3g} px^2"
            )


@dataclass
class SeedClick:
    """One (x, y) pixel inside tissue on a photograph."""

    point: np.ndarray

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64).reshape(2)

    def check_bounds(self, img: Image2D):
        x, y = self.point
        if not (0 <= x < img.width and 0 <= y < img.height):
            raise ValueError(f"seed ({x}, {y}) outside image {img.width}x{img.height}")


@dataclass
class SliceStack:
    """Ordered slices and masks on one common grid.

    slices/masks are index-aligned lists; `order_direction` records the
    operator's anatomical convention without assuming one.
    """

    slices: list
    masks: list
    slice_thickness: float = SLICE_THICKNESS_MM
    order_direction: str = "anterior-posterior"

    def __post_init__(self):
        if len(self.slices) != len(self.masks):
            raise ValueError("slices and masks must be index-aligned")
        if len(self.slices) < 2:
            raise ValueError("a stack needs at least 2 slices")
        g0 = self.slices[0]
        for s in self.slices[1:]:
            if not g0.same_grid(s):
                raise ValueError("all slices must share one grid")
        for m in self.masks:
            if m.values.shape[:2] != g0.values.shape[:2]:
                raise ValueError("masks must share the slice grid")

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def pixel_size(self) -> float:
        return self.slices[0].pixel_size

    @property
    def shape(self) -> tuple:
        return self.slices[0].values.shape[:2]


def _affine_from_point_pairs(src_pts: np.ndarray, dst_pts: np.ndarray) -> Affine2D:
    """Exact affine mapping three src (x, y) points onto three dst points."""
    A = np.zeros((6, 6))
    rhs = np.zeros(6)
    for i in range(3):
        x, y = src_pts[i]
        A[2 * i, 0:2] = [x, y]
        A[2 * i, 4] = 1.0
        A[2 * i + 1, 2:4] = [x, y]
        A[2 * i + 1, 5] = 1.0
        rhs[2 * i] = dst_pts[i, 0]
        rhs[2 * i + 1] = dst_pts[i, 1]
    sol = np.linalg.solve(A, rhs)
    return Affine2D(sol)


def fit_calibration(lm: LandmarkSet) -> tuple:
    """Fit the metric calibration from landmarks.

    Returns (mm_to_px affine, fitted source pixel size in mm). The pixel
    size is sqrt(|det|) of the px->mm linear map.
    """
    ideal = lm.ruler.ideal_points()
    mm_to_px = _affine_from_point_pairs(ideal, lm.points)
    # px per mm = sqrt(|det|) of the mm->px linear part; invert for mm/px
    return mm_to_px, 1.0 / math.sqrt(abs(mm_to_px.det))


def calibrate_photo(raw: Image2D, lm: LandmarkSet,
                    archive_resolution: float = ARCHIVE_RESOLUTION_MM) -> Image2D:
    """Correct pixel size and perspective-as-affine, resample to archive grid.

    The unique affine sending the observed landmarks to their ideal metric
    positions is applied; the output raster covers the warped footprint of
    the input at `archive_resolution` mm/px.
    """
    mm_to_px, _ = fit_calibration(lm)
    px_to_mm = mm_to_px.inverse()
    corners = np.array([
        [0.0, 0.0],
        [raw.width - 1.0, 0.0],
        [0.0, raw.height - 1.0],
        [raw.width - 1.0, raw.height - 1.0],
    ])
    mm = px_to_mm.apply(corners)
    lo = mm.min(axis=0)
    hi = mm.max(axis=0)
    out_w = max(1, int(math.ceil((hi[0] - lo[0]) / archive_resolution)) + 1)
    out_h = max(1, int(math.ceil((hi[1] - lo[1]) / archive_resolution)) + 1)
    # output px -> mm -> raw px
    out_to_mm = Affine2D([archive_resolution, 0.0, 0.0, archive_resolution, lo[0], lo[1]])
    out_to_src = mm_to_px.compose(out_to_mm)
    return resample_slice(raw, out_to_src, (out_h, out_w), archive_resolution)


def _gmm2_em(pixels: np.ndarray, mu0: np.ndarray, mu1: np.ndarray,
             n_iter: int = 30, tol: float = 1e-6):
    """Two-component full-covariance EM over (N, C) pixels.

    Returns (posterior of component 0 per pixel, means). Component 0 is
    the seed-initialized (foreground) component.
    """
    n, c = pixels.shape
    mus = np.stack([mu0, mu1]).astype(np.float64)
    base_cov = np.cov(pixels.T) if n > 1 else np.eye(c)
    base_cov = np.atleast_2d(base_cov) + 1e-4 * np.eye(c)
    covs = np.stack([base_cov, base_cov.copy()])
    w = np.array([0.5, 0.5])
    post = None
    prev_mus = mus.copy()
    for _ in range(n_iter):
        log_p = np.empty((n, 2))
        for k in range(2):
            diff = pixels - mus[k]
            chol = np.linalg.cholesky(covs[k])
            sol = np.linalg.solve(chol, diff.T)
            maha = np.sum(sol * sol, axis=0)
            logdet = 2.0 * np.sum(np.log(np.diag(chol)))
            log_p[:, k] = np.log(w[k] + 1e-300) - 0.5 * (maha + logdet + c * math.log(2 * math.pi))
        m = log_p.max(axis=1, keepdims=True)
        p = np.exp(log_p - m)
        post = p[:, 0] / p.sum(axis=1)
        resp = np.stack([post, 1.0 - post], axis=1)
        nk = resp.sum(axis=0) + 1e-12
        w = nk / n
        for k in range(2):
            mus[k] = resp[:, k] @ pixels / nk[k]
            diff = pixels - mus[k]
            covs[k] = (resp[:, k][:, None] * diff).T @ diff / nk[k] + 1e-6 * np.eye(c)
        shift = np.abs(mus - prev_mus).max()
        prev_mus = mus.copy()
        if shift < tol:
            break
    return post, mus


def extract_mask(photo: Image2D, seed: SeedClick) -> Mask2D:
    """Foreground mask from one seed click via a 2-component RGB mixture.

    The foreground component is initialized at the mean of an 11x11
    window around the seed, the background at the image-border mean.
    After EM classification the connected component containing the seed
    is kept, morphologically closed (0.5 mm radius) and hole-filled. If
    the seed pixel itself classifies as background the click is rejected.
    """
    seed.check_bounds(photo)
    v = photo.values
    h, w, c = v.shape
    px = np.round(seed.point).astype(int)
    sx, sy = int(px[0]), int(px[1])

    y0, y1 = max(0, sy - 5), min(h, sy + 6)
    x0, x1 = max(0, sx - 5), min(w, sx + 6)
    mu_seed = v[y0:y1, x0:x1].reshape(-1, c).mean(axis=0)
    border = np.concatenate([
        v[0, :, :], v[-1, :, :], v[:, 0, :], v[:, -1, :],
    ])
    mu_border = border.mean(axis=0)

    pixels = v.reshape(-1, c)
    post0, _ = _gmm2_em(pixels, mu_seed, mu_border)
    fg = (post0 > 0.5).reshape(h, w)
    if not fg[sy, sx]:
        raise AmbiguousSeedError(
            "seed classifies as background after EM; re-click inside tissue"
        )

    labels, _ = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
    comp = labels == labels[sy, sx]
    radius = max(1, int(round(CLOSING_RADIUS_MM / photo.pixel_size)))
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    selem = (yy ** 2 + xx ** 2) <= radius ** 2
    closed = ndimage.binary_closing(comp, structure=selem)
    # closing can split off slivers; keep the seed's component again
    labels2, _ = ndimage.label(closed, structure=np.ones((3, 3), dtype=int))
    if labels2[sy, sx] == 0:
        comp2 = closed
    else:
        comp2 = labels2 == labels2[sy, sx]
    filled = ndimage.binary_fill_holes(comp2)
    return Mask2D(filled.astype(np.float64), photo.pixel_size)


def _resample_to_resolution(img, new_ps: float):
    ratio = new_ps / img.pixel_size
    if abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1:
        factor = int(round(ratio))
        vals = block_mean_2d(img.values, factor)
        if isinstance(img, Mask2D):
            return Mask2D(np.clip(vals, 0.0, 1.0), new_ps)
        return Image2D(vals, new_ps)
    h = max(1, int(math.ceil(img.values.shape[0] / ratio)))
    w = max(1, int(math.ceil(img.values.shape[1] / ratio)))
    t = Affine2D([ratio, 0.0, 0.0, ratio, 0.0, 0.0])
    return resample_slice(img, t, (h, w), new_ps)


def _mask_bbox(values: np.ndarray):
    rows = np.where(values.sum(axis=1) > 0)[0]
    cols = np.where(values.sum(axis=0) > 0)[0]
    if rows.size == 0:
        return None
    return rows[0], rows[-1], cols[0], cols[-1]


def build_stack(slices, masks, order, thickness: float = SLICE_THICKNESS_MM,
                recon_resolution: float = RECON_RESOLUTION_MM,
                order_direction: str = "anterior-posterior") -> SliceStack:
    """Assemble calibrated slices into a SliceStack on one padded grid.

    Every slice/mask pair is resampled to `recon_resolution`, the common
    grid is sized to the largest mask bounding box plus a 20% margin, and
    each slice is placed with its mask COG at the grid centre (integer
    shift, so content is preserved exactly).
    """
    if len(slices) != len(masks):
        raise ValueError("slices and masks must have equal length")
    n = len(slices)
    if sorted(order) != list(range(n)):
        raise ValueError(f"order must be a permutation of 0..{n - 1}")

    res_slices = []
    res_masks = []
    for i, (s, m) in enumerate(zip(slices, masks)):
        if m.values.sum() <= 0:
            raise EmptyMaskError(f"slice {i} has an empty mask")
        res_slices.append(_resample_to_resolution(s, recon_resolution))
        rm = _resample_to_resolution(m, recon_resolution)
        if rm.values.sum() <= 0:
            raise EmptyMaskError(f"slice {i} mask vanished at recon resolution")
        res_masks.append(rm)

    bbox_h = 0
    bbox_w = 0
    for m in res_masks:
        r0, r1, c0, c1 = _mask_bbox(m.values)
        bbox_h = max(bbox_h, r1 - r0 + 1)
        bbox_w = max(bbox_w, c1 - c0 + 1)
    grid_h = int(math.ceil((1.0 + PAD_MARGIN) * bbox_h))
    grid_w = int(math.ceil((1.0 + PAD_MARGIN) * bbox_w))
    cy, cx = (grid_h - 1) / 2.0, (grid_w - 1) / 2.0

    out_slices = []
    out_masks = []
    for idx in order:
        s, m = res_slices[idx], res_masks[idx]
        cog = center_of_gravity(m) / m.pixel_size  # (x, y) px
        dy = int(round(cy - cog[1]))
        dx = int(round(cx - cog[0]))
        canvas_s = np.zeros((grid_h, grid_w, s.channels))
        canvas_m = np.zeros((grid_h, grid_w))
        src_h, src_w = m.values.shape
        # destination window of the shifted source, clipped to the grid
        dy0, dy1 = max(0, dy), min(grid_h, dy + src_h)
        dx0, dx1 = max(0, dx), min(grid_w, dx + src_w)
        sy0, sy1 = dy0 - dy, dy1 - dy
        sx0, sx1 = dx0 - dx, dx1 - dx
        if dy0 < dy1 and dx0 < dx1:
            canvas_s[dy0:dy1, dx0:dx1] = s.values[sy0:sy1, sx0:sx1]
            canvas_m[dy0:dy1, dx0:dx1] = m.values[sy0:sy1, sx0:sx1]
        out_slices.append(Image2D(canvas_s, recon_resolution))
        out_masks.append(Mask2D(canvas_m, recon_resolution))

    return SliceStack(out_slices, out_masks, thickness, order_direction)
