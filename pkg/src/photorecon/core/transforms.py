"""Geometric transforms for slices (2D affine) and volumes (rigid + z-scale).

Affine2D is a *sampling* map: it sends target-grid pixel coordinates to
source-slice pixel coordinates, point order (x=col, y=row).

Rigid3DScale is a *forward* pose of the source content in world mm: the
content is scaled by 1/z_scale along the stacking axis, rotated, then
translated. Resampling therefore evaluates the source at
``S_z . R^T . (w - t)`` for a target world point ``w`` (see resample).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTransformError


@dataclass
class Affine2D:
    """2D affine map, params (a11, a12, a21, a22, tx, ty).

    Maps (x, y) -> (a11*x + a12*y + tx, a21*x + a22*y + ty).
    """

    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).reshape(6)
        if abs(self.det) < 1e-12:
            raise DegenerateTransformError("affine linear part is singular")

    @staticmethod
    def identity() -> "Affine2D":
        return Affine2D([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])

    @staticmethod
    def from_linear_translation(L: np.ndarray, t: np.ndarray) -> "Affine2D":
        L = np.asarray(L, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        return Affine2D([L[0, 0], L[0, 1], L[1, 0], L[1, 1], t[0], t[1]])

    @staticmethod
    def rotation_about(angle: float, center, translation=(0.0, 0.0)) -> "Affine2D":
        """Rotation by `angle` about `center`, then translation (pixel units)."""
        c, s = np.cos(angle), np.sin(angle)
        L = np.array([[c, -s], [s, c]])
        center = np.asarray(center, dtype=np.float64)
        t = center - L @ center + np.asarray(translation, dtype=np.float64)
        return Affine2D.from_linear_translation(L, t)

    @property
    def linear(self) -> np.ndarray:
        p = self.params
        return np.array([[p[0], p[1]], [p[2], p[3]]])

    @property
    def translation(self) -> np.ndarray:
        return self.params[4:6].copy()

    @property
    def det(self) -> float:
        p = self.params
        return p[0] * p[3] - p[1] * p[2]

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Apply to an (N, 2) array of (x, y) points."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.linear.T + self.translation

    def compose(self, other: "Affine2D") -> "Affine2D":
        """self o other: first apply `other`, then `self`."""
        L = self.linear @ other.linear
        t = self.linear @ other.translation + self.translation
        return Affine2D.from_linear_translation(L, t)

    def inverse(self) -> "Affine2D":
        Li = np.linalg.inv(self.linear)
        return Affine2D.from_linear_translation(Li, -Li @ self.translation)


def affine_at_scale(t: Affine2D, factor: int) -> Affine2D:
    """Re-express a full-resolution pixel affine on a box-downsampled grid.

    Scaled pixel i corresponds to full-res pixel coordinate
    ``factor*i + (factor-1)/2`` on both grids, so the linear part is
    unchanged and only the translation rescales.
    """
    if factor == 1:
        return Affine2D(t.params.copy())
    off = (factor - 1) / 2.0
    L = t.linear
    off_v = np.array([off, off])
    t_new = (L @ off_v + t.translation - off_v) / factor
    return Affine2D.from_linear_translation(L, t_new)


def rotation_matrices(rx: float, ry: float, rz: float):
    """R = Rz @ Ry @ Rx plus the three partial derivatives dR/d(rx, ry, rz)."""
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dRy = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    dRz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    R = Rz @ Ry @ Rx
    return R, (Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx)


@dataclass
class Rigid3DScale:
    """Rigid 3D pose with an extra scale along the stacking (z) axis.

    rotation : Euler angles (rx, ry, rz), composition Rz @ Ry @ Rx, radians
    translation : (tx, ty, tz) mm, applied after rotation
    z_scale : sampling scale along axis 2; content appears compressed by
        1/z_scale (z_scale = true thickness / nominal thickness)
    """

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    z_scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.z_scale <= 0:
            raise ValueError("z_scale must be positive")

    @staticmethod
    def identity() -> "Rigid3DScale":
        return Rigid3DScale()

    def rotation_matrix(self) -> np.ndarray:
        R, _ = rotation_matrices(*self.rotation)
        return R

    def sampling_points(self, world: np.ndarray) -> np.ndarray:
        """Map target world points (N, 3) to source world sampling points.

        src = S_z @ R^T @ (w - t), with S_z = diag(1, 1, z_scale).
        """
        R = self.rotation_matrix()
        q = (np.asarray(world, dtype=np.float64) - self.translation) @ R
        q[:, 2] *= self.z_scale
        return q
