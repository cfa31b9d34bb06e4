import math

import numpy as np
import pytest
from scipy import ndimage

from photorecon.core import AmbiguousSeedError, DegenerateLandmarksError, EmptyMaskError, Image2D, Mask2D, center_of_gravity
from photorecon.preprocess import (
    LandmarkSet,
    RulerSpec,
    SeedClick,
    build_stack,
    calibrate_photo,
    extract_mask,
    fit_calibration,
)

from conftest import disk_mask, smooth_blob


def _photo(values):
    return Image2D(values, 0.1)


class TestCalibrate:
    def test_ideal_landmarks_pure_rescale(self, rng):
        # landmarks at ideal metric positions, photo at 0.2 mm/px
        img = Image2D(rng.random((60, 60, 3)), 0.2)
        pts = RulerSpec().ideal_points() / 0.2  # observed px for a 0.2 mm/px camera
        pts += np.array([5.0, 7.0])
        lm = LandmarkSet(pts)
        out = calibrate_photo(img, lm, archive_resolution=0.2)
        assert out.pixel_size == 0.2
        # output grid covers the photo footprint, so this is the identity
        assert np.allclose(out.values[:60, :60], img.values, atol=1e-9)

    def test_fitted_pixel_size(self):
        # 10 mm ruler spacing imaged at 50 px spacing -> 0.2 mm/px
        pts = np.array([[100.0, 100.0], [150.0, 100.0], [150.0, 150.0]])
        _, ps = fit_calibration(LandmarkSet(pts))
        assert ps == pytest.approx(0.2, abs=1e-12)

    def test_shear_recovery_against_independent_warper(self):
        # metric-true original at 0.2 mm/px; landmark 0 at px (10, 10), so
        # the mm frame is mm = 0.2 * px - 2
        ps = 0.2
        base = smooth_blob(80, 80, 40, 36, 15)[:, :, None] * np.array([0.9, 0.6, 0.3])
        landmarks_orig = RulerSpec().ideal_points() / ps + 10.0

        # corrupt with scipy.ndimage (independent forward warper):
        # corrupted(p) = base(S @ p + off), coordinates (x, y)
        S = np.array([[1.1, 0.18], [-0.08, 0.95]])
        off = np.array([-3.0, 2.0])
        corrupted = np.stack([
            ndimage.affine_transform(base[:, :, c], S[::-1, ::-1], off[::-1], order=1)
            for c in range(3)
        ], axis=-1)
        observed = (landmarks_orig - off) @ np.linalg.inv(S).T
        recovered = calibrate_photo(Image2D(corrupted, ps), LandmarkSet(observed),
                                    archive_resolution=ps)

        # exact expectation: original translated by delta px, delta = (lo + 2)/ps
        # with lo the mm bbox corner of the corrupted footprint
        h, w = corrupted.shape[:2]
        corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], float)
        lo = ((corners @ S.T + off) * ps - 2.0).min(axis=0)
        delta = (lo + 2.0) / ps  # (x, y)
        ref = np.stack([
            ndimage.shift(base[:, :, c], shift=(-delta[1], -delta[0]), order=1)
            for c in range(3)
        ], axis=-1)

        hh = min(recovered.values.shape[0], ref.shape[0]) - 8
        ww = min(recovered.values.shape[1], ref.shape[1]) - 8
        a = recovered.values[8:hh, 8:ww]
        b = ref[8:hh, 8:ww]
        mae = np.abs(a - b).mean()
        assert mae < 0.01 * base.max()

    def test_collinear_landmarks_rejected(self):
        with pytest.raises(DegenerateLandmarksError):
            LandmarkSet(np.array([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]]))


class TestExtractMask:
    def test_bright_disk_recovered(self, rng):
        truth = disk_mask(120, 120, 60, 55, 35)
        img = np.zeros((120, 120, 3))
        img += rng.normal(0, 0.01, img.shape)
        img[truth > 0] = np.array([0.7, 0.5, 0.4]) + rng.normal(
            0, 0.03, (int(truth.sum()), 3))
        photo = _photo(np.clip(img, 0, 1))
        mask = extract_mask(photo, SeedClick([55, 60]))
        inter = (mask.values * truth).sum()
        dice = 2 * inter / (mask.values.sum() + truth.sum())
        assert dice > 0.99

    def test_uniform_image_ambiguous(self):
        photo = _photo(np.full((50, 50, 3), 0.5))
        with pytest.raises(AmbiguousSeedError):
            extract_mask(photo, SeedClick([25, 25]))

    def test_background_seed_ambiguous(self, rng):
        truth = disk_mask(80, 80, 40, 40, 20)
        img = np.zeros((80, 80, 3)) + rng.normal(0, 0.01, (80, 80, 3))
        img[truth > 0] = 0.8
        with pytest.raises(AmbiguousSeedError):
            extract_mask(_photo(np.clip(img, 0, 1)), SeedClick([3, 3]))

    def test_two_blobs_only_seeded_kept(self, rng):
        a = disk_mask(100, 100, 30, 30, 14)
        b = disk_mask(100, 100, 70, 70, 14)
        img = np.zeros((100, 100, 3)) + rng.normal(0, 0.01, (100, 100, 3))
        img[(a + b) > 0] = 0.8
        mask = extract_mask(_photo(np.clip(img, 0, 1)), SeedClick([30, 30]))
        assert (mask.values * a).sum() / a.sum() > 0.95
        assert (mask.values * b).sum() == 0.0

    def test_no_holes_single_component(self, rng):
        ring = disk_mask(100, 100, 50, 50, 30) - disk_mask(100, 100, 50, 50, 10)
        img = np.zeros((100, 100, 3)) + rng.normal(0, 0.01, (100, 100, 3))
        img[ring > 0] = 0.8
        mask = extract_mask(_photo(np.clip(img, 0, 1)), SeedClick([50, 25]))
        filled = ndimage.binary_fill_holes(mask.values > 0.5)
        assert np.array_equal(filled, mask.values > 0.5)  # hole-filled
        _, n = ndimage.label(mask.values > 0.5)
        assert n == 1


class TestBuildStack:
    def _slice(self, w_mask, rng, h=60, w=80):
        m = np.zeros((h, w))
        c0 = (w - w_mask) // 2
        m[10:50, c0:c0 + w_mask] = 1.0
        img = np.repeat(m[:, :, None], 3, axis=2) * 0.5 + rng.normal(0, 0.01, (h, w, 3))
        return Image2D(np.clip(img, 0, 1), 0.5), Mask2D(m, 0.5)

    def test_grid_width_from_padding_rule(self, rng):
        s1, m1 = self._slice(40, rng)
        s2, m2 = self._slice(50, rng)
        stack = build_stack([s1, s2], [m1, m2], [0, 1], recon_resolution=0.5)
        assert stack.shape[1] == math.ceil(1.2 * 50)
        assert stack.shape[0] == math.ceil(1.2 * 40)

    def test_cogs_centered(self, rng):
        s1, m1 = self._slice(40, rng)
        s2, m2 = self._slice(44, rng)
        stack = build_stack([s1, s2], [m1, m2], [0, 1], recon_resolution=0.5)
        h, w = stack.shape
        center = np.array([(w - 1) / 2 * 0.5, (h - 1) / 2 * 0.5])
        for m in stack.masks:
            cog = center_of_gravity(m)
            assert np.all(np.abs(cog - center) <= 0.5 * 0.5 + 1e-9)

    def test_order_applied(self, rng):
        s1, m1 = self._slice(40, rng)
        s2, m2 = self._slice(50, rng)
        stack = build_stack([s1, s2], [m1, m2], [1, 0], recon_resolution=0.5)
        # stored slice 0 is input slice 1 (the wider mask)
        w0 = (stack.masks[0].values.sum(axis=0) > 0).sum()
        w1 = (stack.masks[1].values.sum(axis=0) > 0).sum()
        assert w0 > w1

    def test_grid_independent_of_list_order(self, rng):
        s1, m1 = self._slice(40, rng)
        s2, m2 = self._slice(50, rng)
        a = build_stack([s1, s2], [m1, m2], [0, 1], recon_resolution=0.5)
        b = build_stack([s2, s1], [m2, m1], [0, 1], recon_resolution=0.5)
        assert a.shape == b.shape

    def test_empty_mask_rejected(self, rng):
        s1, m1 = self._slice(40, rng)
        s2, _ = self._slice(50, rng)
        empty = Mask2D(np.zeros((60, 80)), 0.5)
        with pytest.raises(EmptyMaskError, match="1"):
            build_stack([s1, s2], [m1, empty], [0, 1])
