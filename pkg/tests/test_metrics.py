import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from photorecon.core import (
    Affine2D,
    GridMismatchError,
    log_area_penalty,
    ncc,
    soft_dice,
)

from conftest import disk_mask


class TestSoftDice:
    def test_self_overlap_is_one(self):
        a = disk_mask(32, 32, 16, 16, 9)
        assert soft_dice(a, a) == pytest.approx(1.0, abs=1e-6)

    def test_disjoint_supports_zero(self):
        a = np.zeros((8, 8)); a[1, 1] = 1.0
        b = np.zeros((8, 8)); b[6, 6] = 1.0
        assert soft_dice(a, b) == 0.0

    def test_hand_value(self):
        # 2*1 / (2 + 1 + eps) = 2/3 up to the eps guard
        a = np.array([1.0, 1.0, 0.0])
        b = np.array([1.0, 0.0, 0.0])
        assert soft_dice(a, b) == pytest.approx(2.0 / 3.0, abs=1e-8)

    def test_grid_mismatch_rejected(self):
        with pytest.raises(GridMismatchError):
            soft_dice(np.zeros((3, 3)), np.zeros((4, 4)))

    @settings(max_examples=50, derandomize=True, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_symmetric_and_bounded(self, seed):
        r = np.random.default_rng(seed)
        a = r.random((6, 6))
        b = r.random((6, 6))
        d1, d2 = soft_dice(a, b), soft_dice(b, a)
        assert d1 == pytest.approx(d2, abs=1e-15)
        assert 0.0 <= d1 <= 1.0
        assert soft_dice(a, a) == pytest.approx(1.0, abs=1e-6)


class TestNcc:
    def test_identical_is_one(self, rng):
        a = rng.random((16, 16))
        w = np.ones((16, 16))
        assert ncc(a, a, w) == pytest.approx(1.0, abs=1e-12)

    def test_affine_intensity_invariance(self, rng):
        a = rng.random((16, 16, 3))
        w = np.ones((16, 16))
        assert ncc(a, 2.0 * a + 3.0, w) == pytest.approx(1.0, abs=1e-12)
        assert ncc(a, -a, w) == pytest.approx(-1.0, abs=1e-12)

    def test_hand_anticorrelation(self):
        a = np.array([[1.0, 2.0, 3.0]])
        b = np.array([[3.0, 2.0, 1.0]])
        w = np.ones((1, 3))
        assert ncc(a, b, w) == pytest.approx(-1.0, abs=1e-12)

    def test_constant_under_weight_returns_zero(self):
        a = np.full((4, 4), 2.5)
        b = np.zeros((4, 4))
        assert ncc(a, b, np.ones((4, 4))) == 0.0

    @settings(max_examples=50, derandomize=True, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_bounded(self, seed):
        r = np.random.default_rng(seed)
        a = r.random((5, 5))
        b = r.random((5, 5))
        w = r.random((5, 5))
        assert abs(ncc(a, b, w)) <= 1.0 + 1e-12


class TestLogAreaPenalty:
    def test_identity_zero(self):
        assert log_area_penalty(Affine2D.identity()) == 0.0

    def test_uniform_scale_two(self):
        t = Affine2D([2.0, 0.0, 0.0, 2.0, 0.0, 0.0])
        assert log_area_penalty(t) == pytest.approx(math.log(4.0), abs=1e-12)

    def test_area_preserving_anisotropic(self):
        t = Affine2D([2.0, 0.0, 0.0, 0.5, 0.0, 0.0])
        assert log_area_penalty(t) == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=50, derandomize=True, deadline=None)
    @given(st.floats(-math.pi, math.pi), st.floats(0.2, 5.0), st.floats(0.2, 5.0))
    def test_rotation_invariant(self, angle, sx, sy):
        base = Affine2D([sx, 0.0, 0.0, sy, 1.0, -2.0])
        rot = Affine2D.rotation_about(angle, (0.0, 0.0))
        assert log_area_penalty(base.compose(rot)) == pytest.approx(
            log_area_penalty(base), abs=1e-9
        )
