"""Joint slice-stack registration against an external shape reference.

The objective couples four terms: 3D soft Dice between the stacked slice
masks and the resampled reference, neighbor-slice NCC and neighbor-mask
Dice for within-stack smoothness, and a log-area penalty that keeps the
per-slice affines from scaling or shearing away (active only at the
affine level). It is maximised hierarchically: rigid then affine, each
at 1/4, 1/2 and full resolution, with L-BFGS.

Gradients are fully analytic, including the NCC weight term (the weight
is the product of the two resampled masks, itself transform-dependent).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Affine2D,
    DegenerateOverlapError,
    EmptyMaskError,
    Grid3D,
    Mask2D,
    Rigid3DScale,
    Volume3D,
    affine_at_scale,
    center_of_gravity,
    downsample_image,
    downsample_volume,
    log_area_penalty_with_grad,
    minimize_lbfgs,
    ncc_with_partials,
    resample_slice,
    rotation_matrices,
    sample_bilinear,
    sample_trilinear,
    soft_dice_with_partials,
)
from .preprocess import SliceStack

# characteristic parameter scales: optimizer conditioning + gradient-check steps
SCALE_ANGLE = 0.02    # rad (~1 degree)
SCALE_TRANS = 1.0     # mm
SCALE_LINEAR = 0.05   # dimensionless 2x2 entries
SCALE_ZSCALE = 0.02


@dataclass
class ReconWeights:
    """Relative weights of the objective terms (alpha, beta, gamma, nu)."""

    alpha: float
    beta: float
    gamma: float
    nu: float

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.nu) < 0:
            raise ValueError("weights must be nonnegative")
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ValueError("at least one of alpha, beta, gamma must be positive")

    @staticmethod
    def soft_defaults() -> "ReconWeights":
        return ReconWeights(alpha=10.0, beta=1.0, gamma=2.0, nu=0.1)

    @staticmethod
    def hard_defaults() -> "ReconWeights":
        return ReconWeights(alpha=50.0, beta=1.0, gamma=2.0, nu=0.05)


@dataclass
class ReferenceVolume:
    """Shape anchor: a measured binary mask (hard) or probability map (soft)."""

    mode: str
    volume: Volume3D

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ValueError("mode must be 'hard' or 'soft'")
        v = self.volume.values
        if v.min() < -1e-9 or v.max() > 1.0 + 1e-9:
            raise ValueError("reference values must lie in [0, 1]")
        if self.mode == "hard":
            frac = np.minimum(np.abs(v), np.abs(v - 1.0))
            if frac.max() > 1e-9:
                raise ValueError("hard reference must be binary")

    def default_weights(self) -> ReconWeights:
        return ReconWeights.hard_defaults() if self.mode == "hard" else ReconWeights.soft_defaults()


@dataclass
class TransformSet:
    """Per-slice 2D affines plus the 3D reference pose.

    phis map full-resolution common-grid pixel coordinates to source slice
    pixel coordinates. At the rigid level every linear part is a pure
    rotation; z_scale stays 1 unless the reference mode is hard.
    """

    phis: list
    psi: Rigid3DScale
    level: str = "rigid"

    def __post_init__(self):
        if self.level not in ("rigid", "affine"):
            raise ValueError("level must be 'rigid' or 'affine'")
        if self.level == "rigid":
            for i, p in enumerate(self.phis):
                L = p.linear
                err = np.abs(L.T @ L - np.eye(2)).max()
                if err > 1e-8 or p.det < 0:
                    raise ValueError(f"slice {i}: rigid level requires rotation linear parts")


@dataclass
class StageTrace:
    level: str
    factor: int
    objective: list
    stop_reason: str
    warnings: list = field(default_factory=list)


@dataclass
class ReconResult:
    transforms: TransformSet
    stages: list
    warnings: list = field(default_factory=list)


@dataclass
class ReconConfig:
    weights: ReconWeights = None
    scales: tuple = (4, 2, 1)
    max_iter: int = 300
    grad_tol: float = 1e-6
    memory: int = 10
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9


def stack_grid(stack: SliceStack, factor: int = 1) -> Grid3D:
    """3D grid of the stacked slices at a given in-plane scale factor.

    World coordinates are anchored to the full-resolution grid: its centre
    is the world origin, which is also the rotation centre of the 3D pose.
    """
    h, w = stack.shape
    p = stack.pixel_size
    n = stack.n_slices
    wf = math.ceil(w / factor)
    hf = math.ceil(h / factor)
    off = (factor - 1) / 2.0
    g2w = np.diag([factor * p, factor * p, stack.slice_thickness, 1.0])
    g2w[0, 3] = (off - (w - 1) / 2.0) * p
    g2w[1, 3] = (off - (h - 1) / 2.0) * p
    g2w[2, 3] = -(n - 1) / 2.0 * stack.slice_thickness
    return Grid3D((wf, hf, n), (factor * p, factor * p, stack.slice_thickness), g2w)


def _full_center_px(stack: SliceStack, factor: int) -> np.ndarray:
    """Full-res grid centre expressed in scaled pixel coordinates (x, y)."""
    h, w = stack.shape
    off = (factor - 1) / 2.0
    return np.array([((w - 1) / 2.0 - off) / factor, ((h - 1) / 2.0 - off) / factor])


class _Workspace:
    """Pre-resampled pyramid level with packed-parameter objective."""

    def __init__(self, stack: SliceStack, ref: ReferenceVolume, weights: ReconWeights,
                 level: str, factor: int):
        self.level = level
        self.factor = factor
        self.weights = weights
        self.mode = ref.mode
        self.n = stack.n_slices
        self.pixel = stack.pixel_size * factor
        self.full_shape = stack.shape
        self.full_pixel = stack.pixel_size
        self.center = _full_center_px(stack, factor)
        self.slices = [downsample_image(s, factor).values for s in stack.slices]
        self.masks = [downsample_image(m, factor).values for m in stack.masks]
        self.shape = self.masks[0].shape
        self.grid = stack_grid(stack, factor)
        self.ref = downsample_volume(ref.volume, factor)
        self.ref_vals = (self.ref.values if self.ref.values.ndim == 3
                         else self.ref.values[..., 0])
        self.ref_w2g = np.linalg.inv(self.ref.grid_to_world)
        self.world = self.grid.world_coords().reshape(-1, 3)

        h, w = self.shape
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        self.px = np.stack([xx.ravel(), yy.ravel()], axis=1)  # (x, y)
        self.px_c = self.px - self.center

        self.slice_np = 3 if level == "rigid" else 6
        self.with_zscale = (self.mode == "hard")
        self.psi_np = 7 if self.with_zscale else 6
        self.n_params = self.slice_np * self.n + self.psi_np
        # all parameters free by default; the optimizer pins gauge dofs
        self.free = np.ones(self.n_params, dtype=bool)
        scales = []
        for _ in range(self.n):
            if level == "rigid":
                scales += [SCALE_ANGLE, SCALE_TRANS, SCALE_TRANS]
            else:
                scales += [SCALE_LINEAR] * 4 + [SCALE_TRANS, SCALE_TRANS]
        scales += [SCALE_ANGLE] * 3 + [SCALE_TRANS] * 3
        if self.with_zscale:
            scales += [SCALE_ZSCALE]
        self.scales = np.array(scales)

    # -- parameter packing ------------------------------------------------

    def _full_center(self) -> np.ndarray:
        hf, wf = self.full_shape
        return np.array([(wf - 1) / 2.0, (hf - 1) / 2.0])

    def pack(self, ts: TransformSet) -> np.ndarray:
        x = np.zeros(self.n_params)
        c = self._full_center()
        for i, phi in enumerate(ts.phis):
            L = phi.linear
            # full-res convention: src = L (p - c) + c + t_mm / pixel_full
            t_mm = (phi.translation - c + L @ c) * self.full_pixel
            o = self.slice_np * i
            if self.level == "rigid":
                x[o] = math.atan2(L[1, 0], L[0, 0])
                x[o + 1:o + 3] = t_mm
            else:
                x[o:o + 4] = L.ravel()
                x[o + 4:o + 6] = t_mm
        o = self.slice_np * self.n
        x[o:o + 3] = ts.psi.rotation
        x[o + 3:o + 6] = ts.psi.translation
        if self.with_zscale:
            x[o + 6] = ts.psi.z_scale
        return x

    def unpack(self, x: np.ndarray) -> TransformSet:
        phis = []
        c = self._full_center()
        for i in range(self.n):
            L, t_mm = self._slice_Lt(x, i)
            trans = c - L @ c + t_mm / self.full_pixel
            phis.append(Affine2D.from_linear_translation(L, trans))
        o = self.slice_np * self.n
        zs = max(float(x[o + 6]), 1e-3) if self.with_zscale else 1.0
        psi = Rigid3DScale(rotation=x[o:o + 3].copy(),
                           translation=x[o + 3:o + 6].copy(), z_scale=zs)
        return TransformSet(phis=phis, psi=psi, level=self.level)

    def _slice_Lt(self, x, i):
        o = self.slice_np * i
        if self.level == "rigid":
            th = x[o]
            ct, st = math.cos(th), math.sin(th)
            L = np.array([[ct, -st], [st, ct]])
            t_mm = x[o + 1:o + 3]
        else:
            L = x[o:o + 4].reshape(2, 2)
            t_mm = x[o + 4:o + 6]
        return L, t_mm

    # -- objective ---------------------------------------------------------

    def value_and_grad(self, x: np.ndarray):
        w8 = self.weights
        n = self.n
        h, wd = self.shape
        npx = h * wd

        res_m = []
        res_s = []
        grads_m = []
        grads_s = []
        pts_all = []
        for i in range(n):
            L, t_mm = self._slice_Lt(x, i)
            pts = self.px_c @ L.T + self.center + t_mm / self.pixel
            m, gmx, gmy = sample_bilinear(self.masks[i], pts[:, 0], pts[:, 1], with_grad=True)
            s, gsx, gsy = sample_bilinear(self.slices[i], pts[:, 0], pts[:, 1], with_grad=True)
            res_m.append(m.reshape(h, wd))
            res_s.append(s.reshape(h, wd, -1))
            grads_m.append((gmx, gmy))
            grads_s.append((gsx, gsy))
            pts_all.append(pts)

        # 3D dice against the resampled reference
        m_vol = np.stack([m.T for m in res_m], axis=2)  # (W, H, N)
        psi_o = self.slice_np * n
        ang = x[psi_o:psi_o + 3]
        t3 = x[psi_o + 3:psi_o + 6]
        zs = x[psi_o + 6] if self.with_zscale else 1.0
        R, dRs = rotation_matrices(*ang)
        u = (self.world - t3) @ R            # R^T (w - t)
        u_scaled = u.copy()
        u_scaled[:, 2] *= zs
        A = self.ref_w2g[:3, :3]
        idx = u_scaled @ A.T + self.ref_w2g[:3, 3]
        r_flat, r_grad = sample_trilinear(self.ref_vals, idx, with_grad=True)
        r_vol = r_flat.reshape(m_vol.shape)

        d3, dd_dm, dd_dr = soft_dice_with_partials(m_vol, r_vol)

        value = w8.alpha * d3
        g_m = [w8.alpha * dd_dm[:, :, i].T for i in range(n)]  # (H, W) upstream
        g_s = [np.zeros((h, wd, res_s[0].shape[2])) for _ in range(n)]

        # neighbor terms
        for i in range(n - 1):
            wgt = res_m[i] * res_m[i + 1]
            v, dn_da, dn_db, dn_dw = ncc_with_partials(res_s[i], res_s[i + 1], wgt)
            value += w8.beta / n * v
            g_s[i] += w8.beta / n * dn_da
            g_s[i + 1] += w8.beta / n * dn_db
            g_m[i] = g_m[i] + w8.beta / n * dn_dw * res_m[i + 1]
            g_m[i + 1] = g_m[i + 1] + w8.beta / n * dn_dw * res_m[i]

            dv, dd_da, dd_db = soft_dice_with_partials(res_m[i], res_m[i + 1])
            value += w8.gamma / n * dv
            g_m[i] = g_m[i] + w8.gamma / n * dd_da
            g_m[i + 1] = g_m[i + 1] + w8.gamma / n * dd_db

        grad = np.zeros_like(x)

        # regularizer (affine level only; defined 0 at the rigid level)
        if self.level == "affine" and w8.nu > 0:
            for i in range(n):
                L, _ = self._slice_Lt(x, i)
                pen, dpen = log_area_penalty_with_grad(L)
                value -= w8.nu / n * pen
                o = self.slice_np * i
                grad[o:o + 4] -= w8.nu / n * dpen.ravel()

        # chain per-slice gradients through the sampling maps
        for i in range(n):
            gmx, gmy = grads_m[i]
            gsx, gsy = grads_s[i]
            up_m = g_m[i].ravel()
            up_s = g_s[i].reshape(npx, -1)
            fx = up_m * gmx + np.sum(up_s * gsx, axis=1)
            fy = up_m * gmy + np.sum(up_s * gsy, axis=1)
            o = self.slice_np * i
            if self.level == "rigid":
                th = x[o]
                ct, st = math.cos(th), math.sin(th)
                dL = np.array([[-st, -ct], [ct, -st]])
                dpts = self.px_c @ dL.T
                grad[o] += fx @ dpts[:, 0] + fy @ dpts[:, 1]
                grad[o + 1] += fx.sum() / self.pixel
                grad[o + 2] += fy.sum() / self.pixel
            else:
                grad[o + 0] += fx @ self.px_c[:, 0]
                grad[o + 1] += fx @ self.px_c[:, 1]
                grad[o + 2] += fy @ self.px_c[:, 0]
                grad[o + 3] += fy @ self.px_c[:, 1]
                grad[o + 4] += fx.sum() / self.pixel
                grad[o + 5] += fy.sum() / self.pixel

        # chain the reference-pose gradient
        up_r = (w8.alpha * dd_dr).reshape(-1)          # dF/d r_flat
        dF_didx = up_r[:, None] * r_grad               # (N, 3) wrt ref index coords
        dF_dus = dF_didx @ A                           # wrt scaled source world
        if self.with_zscale:
            grad[psi_o + 6] += float(dF_dus[:, 2] @ u[:, 2])
        dF_du = dF_dus * np.array([1.0, 1.0, zs])
        grad[psi_o + 3:psi_o + 6] -= (dF_du @ R.T).sum(axis=0)
        wmt = self.world - t3
        for k in range(3):
            grad[psi_o + k] += float(np.sum(dF_du * (wmt @ dRs[k])))

        return value, grad

    def reference_overlaps(self, x: np.ndarray) -> bool:
        psi_o = self.slice_np * self.n
        ang = x[psi_o:psi_o + 3]
        t3 = x[psi_o + 3:psi_o + 6]
        zs = x[psi_o + 6] if self.with_zscale else 1.0
        R, _ = rotation_matrices(*ang)
        u = (self.world - t3) @ R
        u[:, 2] *= zs
        idx = u @ self.ref_w2g[:3, :3].T + self.ref_w2g[:3, 3]
        vals = sample_trilinear(self.ref_vals, idx)
        return bool(np.any(vals > 0))


def reconstruction_objective(ts: TransformSet, stack: SliceStack,
                             ref: ReferenceVolume, weights: ReconWeights):
    """Objective value and analytic gradient at a given TransformSet.

    The gradient is laid out slice-major: per slice (angle, tx_mm, ty_mm)
    at the rigid level or (a11, a12, a21, a22, tx_mm, ty_mm) at the affine
    level, followed by the pose (rx, ry, rz, tx, ty, tz[, z_scale]).
    """
    ws = _Workspace(stack, ref, weights, ts.level, factor=1)
    x = ws.pack(ts)
    if not ws.reference_overlaps(x):
        raise DegenerateOverlapError("reference falls entirely outside the stack grid")
    return ws.value_and_grad(x)


def init_transforms(stack: SliceStack, ref: ReferenceVolume) -> TransformSet:
    """COG initialization: centre every slice mask, then match 3D COGs."""
    if ref.volume.values.sum() <= 0:
        raise EmptyMaskError("reference volume is empty")
    h, w = stack.shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    phis = []
    for i, m in enumerate(stack.masks):
        if m.values.sum() <= 0:
            raise EmptyMaskError(f"slice {i} has an empty mask")
        cog_px = center_of_gravity(m) / m.pixel_size
        t = cog_px - c
        phis.append(Affine2D([1.0, 0.0, 0.0, 1.0, t[0], t[1]]))

    grid = stack_grid(stack, 1)
    m_vol = np.stack([resample_slice(m, phis[i]).values.T
                      for i, m in enumerate(stack.masks)], axis=2)
    stack_vol = Volume3D(m_vol, grid.voxel_size, grid.grid_to_world)
    cog_stack = center_of_gravity(stack_vol)
    ref_vol = ref.volume
    v = ref_vol.values if ref_vol.values.ndim == 3 else ref_vol.values[..., 0]
    cog_ref = center_of_gravity(Volume3D(v, ref_vol.voxel_size, ref_vol.grid_to_world))
    psi = Rigid3DScale(translation=cog_stack - cog_ref)
    return TransformSet(phis=phis, psi=psi, level="rigid")


def _rigid_to_affine(ts: TransformSet) -> TransformSet:
    return TransformSet(phis=[Affine2D(p.params.copy()) for p in ts.phis],
                        psi=Rigid3DScale(ts.psi.rotation.copy(),
                                         ts.psi.translation.copy(), ts.psi.z_scale),
                        level="affine")


def optimize_reconstruction(stack: SliceStack, ref: ReferenceVolume,
                            cfg: ReconConfig = None, progress=None) -> ReconResult:
    """Hierarchical two-level, three-scale maximisation of the objective.

    Stage order: rigid at scales 1/4, 1/2, 1, then affine at the same
    scales, each seeding the next. Every stage's objective trace is
    monotone non-decreasing by the line-search contract.
    """
    cfg = cfg or ReconConfig()
    weights = cfg.weights or ref.default_weights()
    ts = init_transforms(stack, ref)
    stages = []
    warnings = []
    n_stages = 2 * len(cfg.scales)
    stage_i = 0
    for level in ("rigid", "affine"):
        if level == "affine":
            ts = _rigid_to_affine(ts)
        for factor in cfg.scales:
            ws = _Workspace(stack, ref, weights, level, factor)
            x_full = ws.pack(ts)
            # pin the 2D gauge (global in-plane motion is absorbed by the
            # per-slice transforms; psi keeps its COG-init in-plane pose),
            # and pin z_scale at the affine level: per-slice scaling and
            # the slicing-direction scale are mutually degenerate there
            o = ws.slice_np * ws.n
            ws.free[o + 2] = False  # rz
            ws.free[o + 3] = False  # tx
            ws.free[o + 4] = False  # ty
            if ws.with_zscale and level == "affine":
                ws.free[o + 6] = False
            free = ws.free

            def neg(xs):
                xf = x_full.copy()
                xf[free] = xs * ws.scales[free]
                v, g = ws.value_and_grad(xf)
                return -v, -(g * ws.scales)[free]

            cb = None
            if progress is not None:
                si = stage_i

                def cb(xs, f):
                    progress(si / n_stages, level, factor, -f)

            res = minimize_lbfgs(neg, x_full[free] / ws.scales[free],
                                 memory=cfg.memory,
                                 max_iter=cfg.max_iter, grad_tol=cfg.grad_tol,
                                 c1=cfg.wolfe_c1, c2=cfg.wolfe_c2, callback=cb)
            x_out = x_full.copy()
            x_out[free] = res.x * ws.scales[free]
            ts = ws.unpack(x_out)
            objective = [-f for f in res.trace]
            stages.append(StageTrace(level=level, factor=factor, objective=objective,
                                     stop_reason=res.stop_reason, warnings=res.warnings))
            warnings.extend(f"{level}/{factor}: {w}" for w in res.warnings)
            stage_i += 1
            if progress is not None:
                progress(stage_i / n_stages, level, factor, objective[-1])
    return ReconResult(transforms=ts, stages=stages, warnings=warnings)


def render_reconstruction(stack: SliceStack, ts: TransformSet):
    """Apply the per-slice transforms and stack into image + mask volumes.

    The output header records z spacing thickness * z_scale and recentres
    the world origin on the reconstructed mask COG (gauge fix).
    """
    imgs = []
    msks = []
    for i in range(stack.n_slices):
        imgs.append(resample_slice(stack.slices[i], ts.phis[i]).values)
        msks.append(resample_slice(stack.masks[i], ts.phis[i]).values)
    img_vol = np.stack([im.transpose(1, 0, 2) for im in imgs], axis=2)
    msk_vol = np.stack([m.T for m in msks], axis=2)

    p = stack.pixel_size
    tz = stack.slice_thickness * ts.psi.z_scale
    vs = (p, p, tz)
    mask = Volume3D(np.clip(msk_vol, 0.0, 1.0), vs)
    cog_idx = np.linalg.inv(mask.grid_to_world)[:3, :3] @ center_of_gravity(mask)
    g2w = np.diag([p, p, tz, 1.0])
    g2w[:3, 3] = -g2w[:3, :3] @ cog_idx
    image = Volume3D(img_vol, vs, g2w)
    mask = Volume3D(np.clip(msk_vol, 0.0, 1.0), vs, g2w.copy())
    return image, mask
