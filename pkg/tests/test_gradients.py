"""Analytic-vs-finite-difference checks for every differentiable path:
the three metrics chained through bilinear/trilinear resampling, and the
full reconstruction objective at both hierarchy levels.
"""

import numpy as np
import pytest

from photorecon.core import log_area_penalty_with_grad
from photorecon.reconstruct import ReconWeights, _Workspace

from conftest import gradcheck
from gradsuite import (
    HardRefStandIn,
    eq1_gradient_errors,
    gradient_reference,
    gradient_stack,
    objective_gradient_errors,
    random_point,
)

RTOL = 1e-4


@pytest.fixture(scope="module")
def stack2():
    return gradient_stack(n_slices=3)


@pytest.fixture(scope="module")
def soft_ref():
    return gradient_reference("soft")


class TestMetricGradients:
    """imaging-core invariant: metric gradients through interpolation,
    20 random parameter points each."""

    def test_soft_dice_through_resampling(self, stack2, soft_ref):
        # alpha isolates the 3D dice (trilinear + bilinear chains);
        # gamma isolates the pairwise 2D dice
        for weights in (ReconWeights(1.0, 0.0, 0.0, 0.0),
                        ReconWeights(0.0, 0.0, 1.0, 0.0)):
            ws = _Workspace(stack2, soft_ref, weights, "affine", 1)
            for seed in range(20):
                err, _, _ = gradcheck(ws.value_and_grad, random_point(ws, seed), ws.scales)
                assert err < RTOL

    def test_ncc_through_resampling(self, stack2, soft_ref):
        ws = _Workspace(stack2, soft_ref, ReconWeights(0.0, 1.0, 0.0, 0.0), "affine", 1)
        for seed in range(20):
            err, _, _ = gradcheck(ws.value_and_grad, random_point(ws, seed), ws.scales)
            assert err < RTOL

    def test_trilinear_pose_gradient_with_zscale(self, stack2):
        ref = gradient_reference("hard")
        ws = _Workspace(stack2, ref, ReconWeights(1.0, 0.0, 0.0, 0.0), "rigid", 1)
        for seed in range(20):
            err, _, _ = gradcheck(ws.value_and_grad, random_point(ws, seed), ws.scales)
            assert err < RTOL

    def test_log_area_penalty_gradient(self):
        for seed in range(20):
            r = np.random.default_rng(seed)
            L = np.eye(2) + r.uniform(-0.3, 0.3, (2, 2))

            def fun(x):
                v, g = log_area_penalty_with_grad(x.reshape(2, 2))
                return v, g.ravel()

            err, _, _ = gradcheck(fun, L.ravel(), np.full(4, 0.05))
            assert err < RTOL


class TestObjectiveGradient:
    def test_eq1_soft_reference_both_levels(self):
        errs = eq1_gradient_errors(n_points=10)
        assert max(errs) < RTOL

    def test_eq1_hard_reference_with_zscale(self):
        stack = gradient_stack()
        ref = gradient_reference("hard")
        weights = ReconWeights(2.0, 1.0, 1.5, 0.3)
        errs = objective_gradient_errors(stack, ref, weights, "rigid", range(500, 503))
        errs += objective_gradient_errors(stack, ref, weights, "affine", range(600, 603))
        assert max(errs) < RTOL
