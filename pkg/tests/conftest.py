import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def disk_mask(h, w, cy, cx, r, supersample=1):
    """Rasterized disk; supersample > 1 gives area-coverage (soft) values."""
    if supersample == 1:
        y, x = np.mgrid[0:h, 0:w]
        return ((y - cy) ** 2 + (x - cx) ** 2 <= r * r).astype(np.float64)
    s = supersample
    offs = (np.arange(s) + 0.5) / s - 0.5
    acc = np.zeros((h, w))
    for oy in offs:
        for ox in offs:
            y, x = np.mgrid[0:h, 0:w]
            acc += ((y + oy - cy) ** 2 + (x + ox - cx) ** 2 <= r * r)
    return acc / (s * s)


def smooth_blob(h, w, cy, cx, sigma):
    """Gaussian bump raster, values in (0, 1]."""
    y, x = np.mgrid[0:h, 0:w]
    return np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * sigma ** 2))


def gradcheck(fun, x0, scales, step=1e-4):
    """Compare the analytic gradient of fun(x) -> (f, g) to central differences.

    Per-parameter step is `step * scale_i`; the error is the norm of the
    difference relative to the norm of the analytic gradient vector.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    _, g = fun(x0)
    g_fd = np.zeros_like(g)
    for i in range(x0.size):
        h = step * scales[i]
        xp = x0.copy(); xp[i] += h
        xm = x0.copy(); xm[i] -= h
        fp, _ = fun(xp)
        fm, _ = fun(xm)
        g_fd[i] = (fp - fm) / (2.0 * h)
    denom = max(float(np.linalg.norm(g)), 1e-12)
    err = float(np.linalg.norm(g_fd - g)) / denom
    return err, g, g_fd
