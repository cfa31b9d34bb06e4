"""Evaluation machinery: per-structure Dice, structure volumes, Pearson
correlation with p-values, and the synthetic phantom that provides
desk-scale ground truth for the reconstruction pipeline.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import betainc

from .core import (
    Affine2D,
    Grid3D,
    Image2D,
    Mask2D,
    PhotoReconError,
    Volume3D,
    resample_slice,
)
from .preprocess import SliceStack
from .reconstruct import ReferenceVolume


class UndefinedCorrelationError(PhotoReconError):
    """Pearson r is undefined (zero variance or too few samples)."""


@dataclass
class LabelVolume:
    """Integer labels on a volume grid plus their name table."""

    volume: Volume3D
    label_table: dict

    def __post_init__(self):
        labs = np.unique(self.volume.values)
        unknown = [int(v) for v in labs if int(v) not in self.label_table]
        if unknown:
            raise ValueError(f"labels {unknown} missing from the table")


def dice_per_structure(pred, truth, structures=None) -> dict:
    """Hard Dice 2|A∩B| / (|A|+|B|) per structure label.

    Accepts label arrays (2D slices or 3D volumes) or LabelVolume.
    Structures absent from both inputs are reported as None (undefined).
    """
    a = pred.volume.values if isinstance(pred, LabelVolume) else np.asarray(pred)
    b = truth.volume.values if isinstance(truth, LabelVolume) else np.asarray(truth)
    if a.shape != b.shape:
        raise ValueError(f"grids differ: {a.shape} vs {b.shape}")
    if structures is None:
        structures = sorted(set(np.unique(a)) | set(np.unique(b)))
        structures = [int(s) for s in structures]
    out = {}
    for s in structures:
        ca = (a == s)
        cb = (b == s)
        na, nb = int(ca.sum()), int(cb.sum())
        if na == 0 and nb == 0:
            out[s] = None
            continue
        out[s] = 2.0 * int((ca & cb).sum()) / (na + nb)
    return out


def structure_volumes(seg, voxel_size, structures=None) -> dict:
    """Per-structure volumes in mm^3.

    Hard input (integer label array): voxel count x voxel volume.
    Soft input (object with a `posteriors` (..., K) array and `label_ids`):
    posterior mass x voxel volume.
    """
    voxvol = float(np.prod(voxel_size))
    if hasattr(seg, "posteriors"):
        post = seg.posteriors
        ids = list(seg.label_ids)
        out = {}
        for j, lab in enumerate(ids):
            if structures is not None and lab not in structures:
                continue
            out[int(lab)] = float(post[..., j].sum(dtype=np.float64) * voxvol)
        return out
    labels = np.asarray(seg)
    if structures is None:
        structures = [int(s) for s in np.unique(labels)]
    return {int(s): float(np.count_nonzero(labels == s) * voxvol) for s in structures}


def pearson(v1, v2):
    """Sample Pearson r with a two-sided p-value.

    p comes from t = r*sqrt((n-2)/(1-r^2)) referred to a t distribution
    with n-2 degrees of freedom, evaluated with the regularized
    incomplete beta function.
    """
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if v1.shape != v2.shape or v1.ndim != 1:
        raise ValueError("inputs must be equal-length vectors")
    n = v1.size
    if n < 3:
        raise UndefinedCorrelationError("need at least 3 samples")
    d1 = v1 - v1.mean()
    d2 = v2 - v2.mean()
    s1 = float(d1 @ d1)
    s2 = float(d2 @ d2)
    if s1 <= 0 or s2 <= 0:
        raise UndefinedCorrelationError("zero variance input")
    r = float(d1 @ d2 / math.sqrt(s1 * s2))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    dof = n - 2
    t2 = r * r * dof / (1.0 - r * r)
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t2)))
    return r, p


def placement_dice(stack, recovered, true_transforms) -> list:
    """Per-slice soft Dice between recovered and ground-truth placement.

    The recovered reference pose carries the global in-plane gauge (a
    rigid motion applied to every slice and absorbed by the reference
    pose leaves the reconstruction unchanged), so the ground-truth
    transforms are expressed in the recovered frame first: with the truth
    reference pose at identity, truth placement p maps through
    h(p) = c + A (p - c) + b / pixel, where A is the in-plane block of
    the recovered pose's inverse rotation and b its sampling offset.
    """
    psi = recovered.psi
    R = psi.rotation_matrix()
    A3 = R.T.copy()
    A3[2, :] *= psi.z_scale
    b3 = -A3 @ psi.translation
    A = A3[:2, :2]
    # normalize away the (tiny) out-of-plane leakage so A stays a proper
    # in-plane rotation
    u, _, vt = np.linalg.svd(A)
    A = u @ vt
    h, w = stack.shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    s = stack.pixel_size
    trans = c - A @ c + b3[:2] / s
    gauge = Affine2D.from_linear_translation(A, trans)

    out = []
    for i in range(stack.n_slices):
        got = resample_slice(stack.masks[i], recovered.phis[i]).values
        want = resample_slice(stack.masks[i], true_transforms[i].compose(gauge)).values
        num = 2.0 * float(np.sum(got * want))
        den = float(np.sum(got * got) + np.sum(want * want)) + 1e-8
        out.append(num / den)
    return out


@dataclass
class PhantomSpec:
    """Deterministic phantom recipe; every field feeds the seeded RNG."""

    seed: int = 0
    n_structures: int = 6           # structures inside the brain (>= 2)
    n_slices: int = 20
    slice_thickness: float = 4.0    # true cutting thickness, mm
    in_plane_resolution: float = 1.0
    z_resolution: float = 1.0
    max_rotation_deg: float = 10.0
    max_shift_px: float = 15.0
    brightness_range: float = 0.2   # log-range of the bilinear field gradients
    noise_sigma: float = 0.02
    pad_mm: float = 12.0


@dataclass
class Phantom:
    """Ground-truth volume, slices with known corruption, and the recipe."""

    labels: Volume3D
    image: Volume3D
    mask: Volume3D
    slice_images: list
    slice_masks: list
    true_transforms: list
    true_brightness: np.ndarray     # (n_slices, 3, 4) log-domain coefficients
    label_table: dict
    spec: PhantomSpec = field(repr=False, default=None)

    def stack(self, nominal_thickness: float = None) -> SliceStack:
        t = nominal_thickness if nominal_thickness is not None else self.spec.slice_thickness
        return SliceStack([Image2D(v.values.copy(), v.pixel_size) for v in self.slice_images],
                          [Mask2D(m.values.copy(), m.pixel_size) for m in self.slice_masks],
                          slice_thickness=t)

    def reference(self, mode: str = "hard", smooth_sigma_mm: float = 4.0) -> ReferenceVolume:
        if mode == "hard":
            return ReferenceVolume("hard", Volume3D(self.mask.values.copy(),
                                                    self.mask.voxel_size,
                                                    self.mask.grid_to_world.copy()))
        sigma_vox = [smooth_sigma_mm / v for v in self.mask.voxel_size]
        soft = ndimage.gaussian_filter(self.mask.values, sigma_vox)
        soft = np.clip(soft, 0.0, 1.0)
        return ReferenceVolume("soft", Volume3D(soft, self.mask.voxel_size,
                                                self.mask.grid_to_world.copy()))


def _brain_field(grid_w_flat, rng, semi):
    """Smooth implicit shape: ellipsoid plus random gaussian bumps.

    Bump centres stay away from the z poles so the shape tapers cleanly
    there; the taper inside the sliced window is what identifies the
    slicing-direction scale during reconstruction.
    """
    q = grid_w_flat / semi
    f = 1.0 - np.sum(q * q, axis=1)
    # fixed lateral ridges running the full z extent: every cross-section,
    # poles included, is elongated and asymmetric, so in-plane rotation
    # stays observable even against a heavily blurred reference
    c0 = np.array([0.55 * semi[0], 0.2 * semi[1]])
    d2_ridge = np.sum((grid_w_flat[:, :2] - c0) ** 2, axis=1)
    f = f + 0.38 * np.exp(-d2_ridge / (2.0 * 16.0 ** 2))
    c1 = np.array([-0.5 * semi[0], -0.35 * semi[1]])
    d2_ridge = np.sum((grid_w_flat[:, :2] - c1) ** 2, axis=1)
    f = f + 0.20 * np.exp(-d2_ridge / (2.0 * 10.0 ** 2))
    for _ in range(6):
        c = rng.uniform(-0.55, 0.55, 3) * semi * np.array([1.0, 1.0, 0.75])
        s = rng.uniform(9.0, 16.0)
        amp = rng.uniform(-0.22, 0.22)
        d2 = np.sum((grid_w_flat - c) ** 2, axis=1)
        f = f + amp * np.exp(-d2 / (2.0 * s * s))
    return f


def bilinear_field(coeffs: np.ndarray, shape_hw) -> np.ndarray:
    """Evaluate per-channel bilinear log fields on a slice grid.

    coeffs is (C, 4) ordered (1, u, v, u*v) with u, v in [-1, 1] across
    the grid. Returns (H, W, C).
    """
    h, w = shape_hw
    u = (2.0 * np.arange(w) / max(w - 1, 1) - 1.0)[None, :]
    v = (2.0 * np.arange(h) / max(h - 1, 1) - 1.0)[:, None]
    u = np.broadcast_to(u, (h, w))
    v = np.broadcast_to(v, (h, w))
    basis = np.stack([np.ones((h, w)), u, v, u * v], axis=-1)  # (H, W, 4)
    return basis @ coeffs.T


def make_phantom(spec: PhantomSpec = None) -> Phantom:
    """Deterministic blobby-brain phantom with recorded corruption.

    The brain's z-extent deliberately exceeds the sliced window so every
    slice cuts a substantial cross-section (mimicking a cerebrum block).
    """
    spec = spec or PhantomSpec()
    rng = np.random.default_rng(spec.seed)
    res = spec.in_plane_resolution
    zres = spec.z_resolution
    window = spec.n_slices * spec.slice_thickness
    # z semi-axis barely beyond the window (the taper inside the sliced
    # range pins the z-scale); strong in-plane ellipticity makes rotation
    # observable
    semi = np.array([28.0, 19.0, window * 0.64])

    nx = int(math.ceil((2 * semi[0] + 2 * spec.pad_mm) / res))
    ny = int(math.ceil((2 * semi[1] + 2 * spec.pad_mm) / res))
    nz = int(math.ceil((window + 8.0) / zres))
    grid = Grid3D.centered((nx, ny, nz), (res, res, zres))
    world = grid.world_coords().reshape(-1, 3)

    f = _brain_field(world, rng, semi)
    mask = (f > 0).reshape(nx, ny, nz)

    # nested structures: cortex rim, interior matter, then ellipsoid blobs
    dist = ndimage.distance_transform_edt(mask, sampling=(res, res, zres))
    labels = np.zeros((nx, ny, nz), dtype=np.int32)
    labels[mask] = 1                      # rim
    labels[dist > 4.0] = 2                # interior
    next_label = 3
    for _ in range(spec.n_structures - 2):
        c = rng.uniform(-0.45, 0.45, 3) * semi
        ax = rng.uniform(5.0, 8.5, 3)
        q = (world - c) / ax
        blob = (np.sum(q * q, axis=1) < 1.0).reshape(nx, ny, nz)
        labels[blob & (dist > 2.0)] = next_label
        next_label += 1

    table = {0: "background", 1: "rim", 2: "interior"}
    for k in range(3, next_label):
        table[k] = f"structure_{k}"

    # per-structure RGB with smooth modulation + noise
    colors = np.zeros((next_label, 3))
    hues = rng.permutation(next_label - 1)
    for k in range(1, next_label):
        base = 0.25 + 0.65 * (hues[k - 1] + 0.5) / (next_label - 1)
        colors[k] = np.clip([base, 0.9 - 0.5 * base, 0.35 + 0.4 * math.sin(3.1 * base)],
                            0.05, 0.95)
    img = colors[labels]
    mod = np.sin(world[:, 0] / 17.0) * np.cos(world[:, 1] / 23.0) + \
        0.5 * np.sin(world[:, 2] / 29.0)
    img = img * (1.0 + 0.18 * mod.reshape(nx, ny, nz))[..., None]
    # in-plane optical blur: photographs are band-limited by the camera
    for c in range(3):
        img[..., c] = ndimage.gaussian_filter(img[..., c], (0.7 / res, 0.7 / res, 0.0))
    img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.2)
    img[~mask] = 0.0

    label_vol = Volume3D(labels.astype(np.int32), grid.voxel_size, grid.grid_to_world)
    image_vol = Volume3D(img, grid.voxel_size, grid.grid_to_world)
    mask_vol = Volume3D(mask.astype(np.float64), grid.voxel_size, grid.grid_to_world)

    # cut the central window at the true thickness; each photograph shows
    # the slab's centre plane (the cut face the camera sees)
    layers_per = spec.slice_thickness / zres
    if abs(layers_per - round(layers_per)) > 1e-9:
        raise ValueError("slice_thickness must be an integer multiple of z_resolution")
    layers_per = int(round(layers_per))
    z0_world = -window / 2.0
    z0_idx = (z0_world - grid.grid_to_world[2, 3]) / zres
    z0_idx = int(round(z0_idx))

    center_px = np.array([(nx - 1) / 2.0, (ny - 1) / 2.0])
    slice_images = []
    slice_masks = []
    true_transforms = []
    bright = np.zeros((spec.n_slices, 3, 4))
    for s in range(spec.n_slices):
        a = z0_idx + s * layers_per + layers_per // 2
        sl_img = img[:, :, a]                                    # (nx, ny, 3)
        sl_msk = mask[:, :, a]
        # slice rasters are (row=y, col=x)
        o_img = Image2D(sl_img.transpose(1, 0, 2), res)
        o_msk = Mask2D(sl_msk.T.astype(np.float64), res)

        theta = rng.uniform(-1.0, 1.0) * math.radians(spec.max_rotation_deg)
        shift = rng.uniform(-1.0, 1.0, 2) * spec.max_shift_px
        phi = Affine2D.rotation_about(theta, center_px, shift)
        p_img = resample_slice(o_img, phi.inverse())
        p_msk_soft = resample_slice(o_msk, phi.inverse())
        p_msk = Mask2D((p_msk_soft.values >= 0.5).astype(np.float64), res)

        coeffs = np.zeros((3, 4))
        coeffs[:, 0] = rng.uniform(-0.5, 0.5, 3) * spec.brightness_range
        coeffs[:, 1:] = rng.uniform(-1.0, 1.0, (3, 3)) * spec.brightness_range
        fld = bilinear_field(coeffs, p_img.values.shape[:2])
        corrupted = p_img.values * np.exp(fld)

        slice_images.append(Image2D(corrupted, res))
        slice_masks.append(p_msk)
        true_transforms.append(phi)
        bright[s] = coeffs

    return Phantom(labels=label_vol, image=image_vol, mask=mask_vol,
                   slice_images=slice_images, slice_masks=slice_masks,
                   true_transforms=true_transforms, true_brightness=bright,
                   label_table=table, spec=spec)
