import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from photorecon.core import resample_slice, soft_dice
from photorecon.evaluate import (
    LabelVolume,
    PhantomSpec,
    UndefinedCorrelationError,
    dice_per_structure,
    make_phantom,
    pearson,
    structure_volumes,
)


class TestDicePerStructure:
    def test_identical_inputs(self):
        labs = np.array([[0, 1, 1], [2, 2, 0]])
        out = dice_per_structure(labs, labs)
        assert out[1] == 1.0 and out[2] == 1.0

    def test_disjoint(self):
        a = np.array([1, 1, 0, 0])
        b = np.array([0, 0, 1, 1])
        assert dice_per_structure(a, b)[1] == 0.0

    def test_hand_counts(self):
        # 3-voxel overlap of 4- and 5-voxel regions: 2*3/9
        a = np.zeros(10, dtype=int)
        b = np.zeros(10, dtype=int)
        a[0:4] = 7
        b[1:6] = 7
        assert dice_per_structure(a, b)[7] == pytest.approx(2 * 3 / 9)

    def test_absent_from_both_is_undefined(self):
        a = np.array([0, 1])
        b = np.array([0, 1])
        out = dice_per_structure(a, b, structures=[1, 5])
        assert out[5] is None
        assert out[1] == 1.0

    def test_symmetric_and_relabel_invariant(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, 4, 50)
        b = rng.integers(0, 4, 50)
        d1 = dice_per_structure(a, b)
        d2 = dice_per_structure(b, a)
        assert d1 == d2
        perm = {0: 10, 1: 11, 2: 12, 3: 13}
        a2 = np.vectorize(perm.get)(a)
        b2 = np.vectorize(perm.get)(b)
        d3 = dice_per_structure(a2, b2)
        for k, v in d1.items():
            assert d3[perm[k]] == v


class TestStructureVolumes:
    def test_hard_counts(self):
        labs = np.zeros((10, 1, 1), dtype=int)
        labs[:10] = 3
        out = structure_volumes(labs, (0.5, 0.5, 4.0))
        assert out[3] == pytest.approx(10 * 0.5 * 0.5 * 4.0)

    def test_soft_equals_hard_for_onehot(self):
        class Soft:
            posteriors = np.zeros((4, 1, 1, 2))
            label_ids = [0, 1]

        Soft.posteriors[:2, 0, 0, 0] = 1.0
        Soft.posteriors[2:, 0, 0, 1] = 1.0
        soft = structure_volumes(Soft(), (1.0, 1.0, 1.0))
        hard = structure_volumes(np.array([0, 0, 1, 1]).reshape(4, 1, 1), (1.0, 1.0, 1.0))
        assert soft == hard

    def test_empty_structure_zero(self):
        out = structure_volumes(np.zeros((2, 2, 2), dtype=int), (1, 1, 1), structures=[5])
        assert out[5] == 0.0


class TestPearson:
    def test_perfect_linear(self):
        v = np.array([1.0, 2.0, 3.0, 4.0])
        r, p = pearson(v, 2 * v + 1)
        assert r == pytest.approx(1.0)
        assert p == 0.0

    def test_hand_value(self):
        r, p = pearson([1.0, 2.0, 3.0], [1.0, 2.0, 4.0])
        assert r == pytest.approx(0.9820, abs=1e-4)

    def test_paper_hippocampus_band(self):
        # n=24 cases at r=0.45 must be significant at 0.05
        rng = np.random.default_rng(5)
        # construct vectors with exactly r=0.45 via two-dimensional rotation
        n = 24
        x = rng.normal(size=n)
        y = rng.normal(size=n)
        x -= x.mean(); y -= y.mean()
        y -= (x @ y) / (x @ x) * x  # orthogonalize
        x /= np.linalg.norm(x); y /= np.linalg.norm(y)
        target = 0.45
        v2 = target * x + np.sqrt(1 - target ** 2) * y
        r, p = pearson(x, v2)
        assert r == pytest.approx(0.45, abs=1e-12)
        assert p < 0.05

    def test_matches_scipy(self):
        from scipy import stats
        rng = np.random.default_rng(1)
        a = rng.normal(size=12)
        b = rng.normal(size=12) + 0.4 * a
        r, p = pearson(a, b)
        r2, p2 = stats.pearsonr(a, b)
        assert r == pytest.approx(r2, abs=1e-12)
        assert p == pytest.approx(p2, abs=1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    @settings(max_examples=40, derandomize=True, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(0.1, 50), st.floats(-10, 10),
           st.floats(0.1, 50), st.floats(-10, 10))
    def test_symmetry_and_affine_invariance(self, seed, s1, o1, s2, o2):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=8)
        b = rng.normal(size=8)
        r0, _ = pearson(a, b)
        r1, _ = pearson(b, a)
        r2, _ = pearson(s1 * a + o1, s2 * b + o2)
        assert r0 == pytest.approx(r1, abs=1e-12)
        assert r0 == pytest.approx(r2, abs=1e-9)


class TestLabelVolume:
    def test_unknown_labels_rejected(self):
        from photorecon.core import Volume3D
        vol = Volume3D(np.array([[[2]]], dtype=np.int32), (1, 1, 1))
        with pytest.raises(ValueError):
            LabelVolume(vol, {0: "bg"})


class TestPhantom:
    def test_deterministic(self):
        a = make_phantom(PhantomSpec(seed=7, n_slices=6, pad_mm=8.0))
        b = make_phantom(PhantomSpec(seed=7, n_slices=6, pad_mm=8.0))
        assert np.array_equal(a.image.values, b.image.values)
        assert np.array_equal(a.labels.values, b.labels.values)
        for ta, tb in zip(a.true_transforms, b.true_transforms):
            assert np.array_equal(ta.params, tb.params)
        assert np.array_equal(a.true_brightness, b.true_brightness)

    def test_zero_perturbation_slices_are_cross_sections(self):
        spec = PhantomSpec(seed=3, n_slices=6, max_rotation_deg=0.0,
                          max_shift_px=0.0, brightness_range=0.0, pad_mm=8.0)
        ph = make_phantom(spec)
        # slice masks equal plain z-plane cross sections of the mask volume
        nz = ph.mask.dims[2]
        z0 = int(round((-(spec.n_slices * spec.slice_thickness) / 2.0
                        - ph.mask.grid_to_world[2, 3])))
        layers = int(spec.slice_thickness)
        for n in [0, 3, 5]:
            plane = ph.mask.values[:, :, z0 + n * layers + layers // 2].T
            assert np.array_equal(ph.slice_masks[n].values, plane)

    def test_recorded_transforms_invert_corruption(self):
        # noise-free: iid pixel noise cannot round-trip through interpolation
        spec = PhantomSpec(seed=4, n_slices=6, brightness_range=0.0,
                           noise_sigma=0.0, pad_mm=14.0)
        ph = make_phantom(spec)
        nz = ph.mask.dims[2]
        z0 = int(round((-(spec.n_slices * spec.slice_thickness) / 2.0
                        - ph.mask.grid_to_world[2, 3])))
        layers = int(spec.slice_thickness)
        for n in [0, 2, 5]:
            recovered = resample_slice(ph.slice_images[n], ph.true_transforms[n])
            original = ph.image.values[:, :, z0 + n * layers + layers // 2].transpose(1, 0, 2)
            err = np.abs(recovered.values - original).mean()
            assert err < 0.01 * ph.image.values.max()
            # a wrong transform moves the whole section and fails this margin
            wrong = resample_slice(ph.slice_images[n], ph.true_transforms[(n + 1) % 6])
            assert np.abs(wrong.values - original).mean() > err * 2

    def test_structures_have_volume(self):
        ph = make_phantom(PhantomSpec(seed=1))
        labs, counts = np.unique(ph.labels.values, return_counts=True)
        assert len(labs) >= 6
        for lab, cnt in zip(labs, counts):
            if lab > 0:
                assert cnt >= 500
