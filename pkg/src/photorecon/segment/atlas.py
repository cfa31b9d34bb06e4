"""Probabilistic atlas container, synthetic-atlas generation for tests,
and the affine atlas-to-volume initialization."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..core import (
    EmptyMaskError,
    Grid3D,
    Volume3D,
    center_of_gravity,
    downsample_volume,
    minimize_lbfgs,
    sample_trilinear,
    soft_dice_with_partials,
)

SCALE_LINEAR = 0.02
SCALE_TRANS = 1.0


@dataclass
class AtlasPrior:
    """K-class probability atlas with label metadata.

    prob_volume values are (nx, ny, nz, K); channel j corresponds to the
    j-th entry of label_table (insertion order). class_to_gmm groups
    classes into mixture-sharing tissue groups; a group named
    "background" gets 3 mixture components by default, every other group
    gets 1.
    """

    prob_volume: Volume3D
    label_table: dict
    class_to_gmm: dict
    control_grid_spacing: float = 10.0
    background_index: int = 0

    def __post_init__(self):
        v = self.prob_volume.values
        if v.ndim != 4:
            raise ValueError("atlas probabilities must be 4D")
        if v.shape[3] != len(self.label_table):
            raise ValueError("label table does not match channel count")
        if v.shape[3] < 2:
            raise ValueError("need at least 2 classes")
        sums = v.sum(axis=3)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValueError("per-voxel probabilities must sum to 1")
        missing = set(self.class_to_gmm) ^ set(self.label_table)
        if missing:
            raise ValueError(f"class_to_gmm does not cover labels: {missing}")

    @property
    def n_classes(self) -> int:
        return self.prob_volume.values.shape[3]

    @property
    def label_ids(self) -> list:
        return list(self.label_table.keys())

    def tissue_probability(self) -> Volume3D:
        """1 - background probability, used for shape registration."""
        v = 1.0 - self.prob_volume.values[..., self.background_index]
        return Volume3D(np.clip(v, 0.0, 1.0), self.prob_volume.voxel_size,
                        self.prob_volume.grid_to_world.copy())

    def components_per_class(self) -> list:
        return [3 if self.class_to_gmm[i] == "background" else 1
                for i in self.label_ids]


def synthetic_atlas(seed: int = 0, n_structures: int = 6, dims=(40, 44, 32),
                    voxel_size=(2.0, 2.0, 2.0), blur_sigma_vox: float = 0.8,
                    control_grid_spacing: float = 10.0):
    """Deterministic test atlas: blobby nested structures, slightly blurred.

    Returns (AtlasPrior, LabelVolume-style ground-truth labels). The
    blur keeps probabilities crisp in structure interiors with narrow
    soft transition bands, so a volume sampled from the atlas is
    recoverable by MAP segmentation.
    """
    rng = np.random.default_rng(seed)
    grid = Grid3D.centered(dims, voxel_size)
    world = grid.world_coords().reshape(-1, 3)
    nx, ny, nz = dims
    semi = np.array([(nx - 8) * voxel_size[0], (ny - 8) * voxel_size[1],
                     (nz - 8) * voxel_size[2]]) / 2.0

    q = world / semi
    f = 1.0 - np.sum(q * q, axis=1)
    for _ in range(4):
        c = rng.uniform(-0.5, 0.5, 3) * semi
        s = rng.uniform(0.35, 0.6) * float(np.min(semi))
        f = f + rng.uniform(-0.2, 0.25) * np.exp(
            -np.sum((world - c) ** 2, axis=1) / (2 * s * s))
    brain = (f > 0).reshape(dims)

    dist = ndimage.distance_transform_edt(brain, sampling=voxel_size)
    labels = np.zeros(dims, dtype=np.int32)
    labels[brain] = 1
    labels[dist > 1.5 * max(voxel_size)] = 2
    nxt = 3
    for _ in range(n_structures - 2):
        c = rng.uniform(-0.45, 0.45, 3) * semi
        ax = rng.uniform(0.18, 0.3, 3) * semi
        blob = (np.sum(((world - c) / ax) ** 2, axis=1) < 1.0).reshape(dims)
        labels[blob & (dist > max(voxel_size))] = nxt
        nxt += 1

    k = nxt
    onehot = np.zeros(dims + (k,))
    for j in range(k):
        onehot[..., j] = ndimage.gaussian_filter((labels == j).astype(np.float64),
                                                 blur_sigma_vox)
    onehot = np.clip(onehot, 1e-12, None)
    onehot /= onehot.sum(axis=3, keepdims=True)

    table = {0: "background", 1: "rim", 2: "interior"}
    groups = {0: "background", 1: "rim", 2: "interior"}
    for j in range(3, k):
        table[j] = f"structure_{j}"
        groups[j] = f"structure_{j}"
    prior = AtlasPrior(Volume3D(onehot, voxel_size, grid.grid_to_world),
                       table, groups, control_grid_spacing)
    truth = Volume3D(labels, voxel_size, grid.grid_to_world)
    return prior, truth


class _AffineWorkspace:
    """Soft-Dice affine registration of atlas tissue onto a brain mask."""

    def __init__(self, tissue: Volume3D, mask: Volume3D, factor: int):
        self.tissue = downsample_volume(tissue, factor)
        self.mask = downsample_volume(mask, factor)
        self.t_w2g = np.linalg.inv(self.tissue.grid_to_world)
        self.world = self.mask.grid.world_coords().reshape(-1, 3)
        self.target = self.mask.values.reshape(-1)
        self.c_vol = center_of_gravity(mask)
        self.c_atl = center_of_gravity(tissue)
        self.scales = np.array([SCALE_LINEAR] * 9 + [SCALE_TRANS] * 3)

    def sample_points(self, x):
        L = x[:9].reshape(3, 3)
        t = x[9:12]
        return (self.world - self.c_vol) @ L.T + self.c_atl + t, L

    def value_and_grad(self, x):
        pts, L = self.sample_points(x)
        idx = pts @ self.t_w2g[:3, :3].T + self.t_w2g[:3, 3]
        vals, grad = sample_trilinear(self.tissue.values, idx, with_grad=True)
        d, dd_da, _ = soft_dice_with_partials(vals, self.target)
        up = dd_da[:, None] * grad          # dF/d idx
        dpts = up @ self.t_w2g[:3, :3]      # dF/d sample world point
        g = np.zeros(12)
        rel = self.world - self.c_vol
        for a in range(3):
            for b in range(3):
                g[3 * a + b] = dpts[:, a] @ rel[:, b]
        g[9:12] = dpts.sum(axis=0)
        return d, g


def moments_init(tissue: Volume3D, mask: Volume3D):
    """COG + second-moment initialization of the world-to-world map."""
    def moments(vol):
        v = vol.values
        w = v.reshape(-1)
        total = w.sum()
        pts = vol.grid.world_coords().reshape(-1, 3)
        mu = (w @ pts) / total
        d = pts - mu
        cov = (d * w[:, None]).T @ d / total
        return mu, cov

    mu_v, cov_v = moments(mask)
    mu_a, cov_a = moments(tissue)

    def sqrtm(c):
        vals, vecs = np.linalg.eigh(c)
        vals = np.clip(vals, 1e-9, None)
        return vecs @ np.diag(np.sqrt(vals)) @ vecs.T

    L = sqrtm(cov_a) @ np.linalg.inv(sqrtm(cov_v))
    return L, mu_v, mu_a


def affine_atlas_init(atlas: AtlasPrior, mask_vol: Volume3D,
                      scales=(4, 2, 1), max_iter=100) -> np.ndarray:
    """Fit the 12-parameter atlas-to-volume affine by maximising soft Dice.

    The optimisation acts on the sampling map (volume world to atlas
    world); the returned 4x4 matrix is its inverse, i.e. the forward
    atlas-to-volume placement.
    """
    if mask_vol.values.sum() <= 0:
        raise EmptyMaskError("empty brain mask")
    tissue = atlas.tissue_probability()
    if tissue.values.sum() <= 0:
        raise EmptyMaskError("atlas tissue probability is empty")
    mask3 = Volume3D(mask_vol.values if mask_vol.values.ndim == 3
                     else mask_vol.values[..., 0],
                     mask_vol.voxel_size, mask_vol.grid_to_world)

    L0, mu_v, mu_a = moments_init(tissue, mask3)
    x = np.concatenate([L0.ravel(), np.zeros(3)])
    for factor in scales:
        ws = _AffineWorkspace(tissue, mask3, factor)

        def neg(xs):
            v, g = ws.value_and_grad(xs * ws.scales)
            return -v, -g * ws.scales

        res = minimize_lbfgs(neg, x / ws.scales, memory=10, max_iter=max_iter,
                             grad_tol=1e-6)
        x = res.x * ws.scales

    L = x[:9].reshape(3, 3)
    t = x[9:12]
    ws1 = _AffineWorkspace(tissue, mask3, 1)
    # sampling map: q(w) = L (w - c_vol) + c_atl + t; invert for atlas->volume
    M = np.eye(4)
    M[:3, :3] = L
    M[:3, 3] = ws1.c_atl + t - L @ ws1.c_vol
    return np.linalg.inv(M)
