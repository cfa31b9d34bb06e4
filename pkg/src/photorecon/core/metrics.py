"""Differentiable similarity metrics and the area regularizer.

All metrics accumulate in float64 and are pure functions; the
`*_with_partials` variants additionally return exact partial derivatives
with respect to their raster inputs, which the registration objective
chains through the interpolation Jacobian.
"""

import numpy as np

from .errors import DegenerateTransformError, GridMismatchError
from .transforms import Affine2D

DICE_EPS = 1e-8
VAR_EPS = 1e-12


def _values(a):
    return a.values if hasattr(a, "values") else np.asarray(a, dtype=np.float64)


def _check_shapes(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise GridMismatchError(f"shape mismatch {a.shape} vs {b.shape}")


def soft_dice(a, b) -> float:
    """Soft Dice overlap 2<a,b> / (|a|^2 + |b|^2 + eps) of [0,1] rasters."""
    a = _values(a)
    b = _values(b)
    _check_shapes(a, b)
    num = 2.0 * np.sum(a * b, dtype=np.float64)
    den = np.sum(a * a, dtype=np.float64) + np.sum(b * b, dtype=np.float64) + DICE_EPS
    return float(num / den)


def soft_dice_with_partials(a: np.ndarray, b: np.ndarray):
    """soft_dice plus dD/da and dD/db (same shapes as the inputs)."""
    _check_shapes(a, b)
    num = 2.0 * np.sum(a * b, dtype=np.float64)
    den = np.sum(a * a, dtype=np.float64) + np.sum(b * b, dtype=np.float64) + DICE_EPS
    d = num / den
    dd_da = (2.0 * b - 2.0 * d * a) / den
    dd_db = (2.0 * a - 2.0 * d * b) / den
    return float(d), dd_da, dd_db


def _ncc_channel(a, b, w, wsum):
    mu_a = np.sum(w * a, dtype=np.float64) / wsum
    mu_b = np.sum(w * b, dtype=np.float64) / wsum
    da = a - mu_a
    db = b - mu_b
    va = np.sum(w * da * da, dtype=np.float64)
    vb = np.sum(w * db * db, dtype=np.float64)
    if va < VAR_EPS or vb < VAR_EPS:
        return 0.0, None
    cov = np.sum(w * da * db, dtype=np.float64)
    denom = np.sqrt(va * vb)
    return cov / denom, (da, db, va, vb, cov, denom)


def ncc(a, b, weight) -> float:
    """Weighted zero-mean normalized cross-correlation, averaged over channels.

    The weight is the product of the two slice masks, so only overlapping
    tissue drives the score. Returns 0 when either weighted variance is
    below 1e-12.
    """
    av = _values(a)
    bv = _values(b)
    wv = _values(weight)
    if av.ndim == 2:
        av = av[:, :, None]
    if bv.ndim == 2:
        bv = bv[:, :, None]
    _check_shapes(av, bv)
    _check_shapes(av[..., 0], wv)
    wsum = np.sum(wv, dtype=np.float64)
    if wsum <= 0:
        return 0.0
    vals = []
    for c in range(av.shape[2]):
        v, _ = _ncc_channel(av[:, :, c], bv[:, :, c], wv, wsum)
        vals.append(v)
    return float(np.mean(vals))


def ncc_with_partials(a: np.ndarray, b: np.ndarray, w: np.ndarray):
    """ncc plus exact partials dN/da, dN/db and dN/dw.

    Inputs a, b are (H, W, C); w is (H, W). The weight partial matters
    because the weight itself is mask-dependent during registration.
    """
    C = a.shape[2]
    _check_shapes(a[..., 0], w)
    wsum = np.sum(w, dtype=np.float64)
    dn_da = np.zeros_like(a)
    dn_db = np.zeros_like(b)
    dn_dw = np.zeros_like(w)
    if wsum <= 0:
        return 0.0, dn_da, dn_db, dn_dw
    total = 0.0
    for c in range(C):
        val, aux = _ncc_channel(a[:, :, c], b[:, :, c], w, wsum)
        total += val
        if aux is None:
            continue
        da, db, va, vb, cov, denom = aux
        dn_da[:, :, c] = (w / denom) * (db - (cov / va) * da) / C
        dn_db[:, :, c] = (w / denom) * (da - (cov / vb) * db) / C
        dn_dw += (da * db / denom - 0.5 * val * (da * da / va + db * db / vb)) / C
    return float(total / C), dn_da, dn_db, dn_dw


def log_area_penalty(t: Affine2D) -> float:
    """|log |det L|| of the affine linear part; 0 for any area-preserving map."""
    d = abs(t.det)
    if d < 1e-12:
        raise DegenerateTransformError("zero determinant in log_area_penalty")
    return abs(np.log(d))


def log_area_penalty_with_grad(L: np.ndarray):
    """Penalty and its gradient with respect to the 2x2 linear part.

    d|log|det L||/dL = sign(log|det L|) * inv(L)^T; the subgradient at
    det = +-1 is taken as 0.
    """
    det = L[0, 0] * L[1, 1] - L[0, 1] * L[1, 0]
    ad = abs(det)
    if ad < 1e-12:
        raise DegenerateTransformError("zero determinant in log_area_penalty")
    logd = np.log(ad)
    s = np.sign(logd)
    grad = s * np.linalg.inv(L).T
    return abs(logd), grad
