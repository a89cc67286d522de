"""FGSM steps, Lp projections, random controls and the UAP loop."""

import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uapkit.attacks import (AttackBudget, AttackParams, Perturbation,
                            fgsm_step, generate_uap, lp_norm, project,
                            random_uap)
from uapkit.datasets import Dataset
from uapkit.network import Network, dense, softmax

RNG = np.random.default_rng(99)
ALL_NORMS = (1.0, 2.0, math.inf)


def l1_projection_oracle(v, xi, tol=1e-13):
    """Independent L1-ball projection via bisection on the soft threshold.

    The projection has the form sign(v) * max(|v| - theta, 0); bisect theta
    until the L1 norm hits xi.
    """
    a = np.abs(v.ravel())
    if a.sum() <= xi:
        return v.copy()
    lo, hi = 0.0, a.max()
    while hi - lo > tol:
        mid = (lo + hi) / 2.0
        if np.maximum(a - mid, 0.0).sum() > xi:
            lo = mid
        else:
            hi = mid
    theta = (lo + hi) / 2.0
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


class TestFgsmStep:
    def test_linf_sign_closed_form(self):
        step = fgsm_step(np.array([2.0, -3.0, 0.0]), 0.001, math.inf)
        assert np.array_equal(step, np.array([0.001, -0.001, 0.0]))

    def test_l2_normalization_closed_form(self):
        grad = np.array([3.0, 4.0])
        step = fgsm_step(grad, 0.001, 2.0)
        assert np.array_equal(step, 0.001 * grad / 5.0)
        assert step == pytest.approx([0.0006, 0.0008], rel=1e-12)

    def test_targeted_negates_sign(self):
        step = fgsm_step(np.array([1.0, -1.0]), 0.001, math.inf, "targeted")
        assert np.array_equal(step, np.array([-0.001, 0.001]))

    def test_linf_components_limited_to_three_values(self):
        for _ in range(30):
            g = RNG.standard_normal(17)
            g[RNG.integers(0, 17)] = 0.0
            step = fgsm_step(g, 0.25, math.inf)
            assert set(np.unique(step)) <= {-0.25, 0.0, 0.25}

    @pytest.mark.parametrize("p", [1.0, 2.0])
    def test_lp_norm_equals_eps(self, p):
        for _ in range(30):
            g = RNG.standard_normal((5, 5))
            step = fgsm_step(g, 0.37, p)
            assert lp_norm(step, p) == pytest.approx(0.37, rel=1e-12)

    @pytest.mark.parametrize("p", ALL_NORMS)
    def test_zero_gradient_gives_zero_step(self, p):
        assert np.array_equal(fgsm_step(np.zeros(9), 0.1, p), np.zeros(9))

    def test_nonfinite_gradient_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            fgsm_step(np.array([1.0, np.nan]), 0.1, 2.0)

    def test_nonpositive_eps_rejected(self):
        with pytest.raises(ValueError, match="eps"):
            fgsm_step(np.ones(3), 0.0, 2.0)


class TestProject:
    def test_l2_radial_scaling(self):
        v = RNG.standard_normal(12)
        v *= 10.0 / lp_norm(v, 2.0)
        assert project(v, 2.0, 5.0) == pytest.approx(v * 0.5, rel=1e-12)

    def test_linf_per_coordinate_clamp(self):
        assert np.array_equal(project(np.array([0.5, -3.0]), math.inf, 1.0),
                              np.array([0.5, -1.0]))

    @pytest.mark.parametrize("p", ALL_NORMS)
    def test_inside_ball_returned_bit_identical(self, p):
        v = RNG.standard_normal((3, 4))
        v *= 0.9 / lp_norm(v, p)
        assert np.array_equal(project(v, p, 1.0), v)

    @pytest.mark.parametrize("p", ALL_NORMS)
    def test_norm_within_budget_and_idempotent(self, p):
        for _ in range(200):
            v = RNG.standard_normal(11) * RNG.uniform(0.1, 20.0)
            xi = RNG.uniform(0.05, 5.0)
            w = project(v, p, xi)
            assert lp_norm(w, p) <= xi * (1.0 + 1e-9)
            w2 = project(w, p, xi)
            if p == 1.0:
                assert np.abs(w2 - w).max() <= 1e-12
            else:
                assert np.array_equal(w2, w)

    def test_l2_output_is_nonnegative_multiple_of_input(self):
        for _ in range(50):
            v = RNG.standard_normal(7) * RNG.uniform(0.1, 30.0)
            xi = RNG.uniform(0.05, 2.0)
            w = project(v, 2.0, xi)
            denom = float(v @ v)
            c = float(w @ v) / denom
            assert c >= 0.0
            assert np.abs(w - c * v).max() < 1e-12

    def test_l1_matches_bisection_oracle(self):
        for _ in range(100):
            v = RNG.standard_normal(9) * RNG.uniform(0.2, 10.0)
            xi = RNG.uniform(0.1, 4.0)
            assert project(v, 1.0, xi) == pytest.approx(
                l1_projection_oracle(v, xi), abs=1e-9)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40),
           st.floats(1e-3, 1e3))
    @settings(max_examples=200, deadline=None)
    def test_projection_properties_hold_for_arbitrary_vectors(self, values, xi):
        v = np.asarray(values)
        for p in ALL_NORMS:
            w = project(v, p, xi)
            assert lp_norm(w, p) <= xi * (1.0 + 1e-9)
            if lp_norm(v, p) <= xi:
                assert np.array_equal(w, v)

    def test_shape_preserved(self):
        v = RNG.standard_normal((4, 5, 2)) * 100.0
        for p in ALL_NORMS:
            assert project(v, p, 1.0).shape == v.shape

    def test_nonpositive_radius_rejected(self):
        with pytest.raises(ValueError, match="xi"):
            project(np.ones(3), 2.0, 0.0)


class TestRandomUap:
    @pytest.mark.parametrize("p", ALL_NORMS)
    def test_norm_matches_radius(self, p):
        pert = random_uap((6, 6, 1), p, 3.5, seed=5)
        assert pert.norm() == pytest.approx(3.5, rel=1e-9)
        assert pert.within_budget()
        assert pert.provenance == "random"

    def test_same_seed_bit_identical(self):
        a = random_uap((5, 5), 2.0, 1.0, seed=9)
        b = random_uap((5, 5), 2.0, 1.0, seed=9)
        assert np.array_equal(a.tensor, b.tensor)

    def test_different_seeds_differ(self):
        a = random_uap((5, 5), 2.0, 1.0, seed=9)
        b = random_uap((5, 5), 2.0, 1.0, seed=10)
        assert not np.array_equal(a.tensor, b.tensor)


class TestParamValidation:
    def test_targeted_requires_target(self):
        with pytest.raises(ValueError, match="target"):
            AttackParams(mode="targeted")

    def test_nontargeted_forbids_target(self):
        with pytest.raises(ValueError, match="target"):
            AttackParams(mode="nontargeted", target=1)

    def test_budget_validation(self):
        with pytest.raises(ValueError, match="xi"):
            AttackBudget(2.0, 0.0)
        with pytest.raises(ValueError, match="norm"):
            AttackBudget(3.0, 1.0)
        with pytest.raises(ValueError, match="zeta"):
            AttackBudget(2.0, 1.0, zeta=1.5)


def steep_linear_net():
    """predict(x) is argmax(x) on a 2-pixel input, with sharp boundaries."""
    net = Network([dense(2), softmax()], (2,), pixel_domain=(0.0, 1.0))
    net.layers[0].W = 10.0 * np.eye(2)
    net.layers[0].b = np.zeros(2)
    return net


def two_point_data():
    xs = np.array([[0.52, 0.48], [0.2, 0.8]])
    return Dataset(xs, np.array([0, 1]), ["a", "b"], pixel_domain=(0.0, 1.0))


class TestGenerateUap:
    def test_zero_passes_gives_zero_perturbation(self):
        net = steep_linear_net()
        pert = generate_uap(net, two_point_data(), AttackBudget(math.inf, 0.2),
                            AttackParams(eps=0.05, i_max=0))
        assert np.array_equal(pert.tensor, np.zeros(2))

    def test_empty_dataset_gives_zero_perturbation(self):
        net = steep_linear_net()
        empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), ["a", "b"],
                        pixel_domain=(0.0, 1.0))
        pert = generate_uap(net, empty, AttackBudget(math.inf, 0.2),
                            AttackParams(eps=0.05, i_max=3))
        assert np.array_equal(pert.tensor, np.zeros(2))
        assert pert.provenance == "uap_nontargeted"

    def test_nontargeted_single_pass_matches_hand_trace(self):
        # Hand-executed trace (same result for either visit order):
        #   x1 = [0.52, 0.48]: predicted 0 with logits [5.2, 4.8].
        #     grad sign is [-1, +1] (loss of class 0 falls with pixel 0),
        #     step = 0.05 * [-1, 1], x_adv = [0.47, 0.53] -> class 1: accept,
        #     rho = x_adv - x1 (projection is a no-op at xi = 0.2).
        #   x2 = [0.2, 0.8]: predicted 1; one step cannot flip it: reject.
        net = steep_linear_net()
        data = two_point_data()
        x1 = data.images[0]
        step = np.array([-0.05, 0.05])
        expected = np.clip(x1 + step, 0.0, 1.0) - x1

        pert = generate_uap(net, data, AttackBudget(math.inf, 0.2),
                            AttackParams(eps=0.05, i_max=1, seed=3))
        assert np.array_equal(pert.tensor, expected)
        assert pert.provenance == "uap_nontargeted"

        # Verify the trace's claims about the model, so the oracle stays honest.
        assert net.predict(x1) == 0
        assert np.array_equal(np.sign(net.input_gradient(x1, 0)), [-1.0, 1.0])
        assert net.predict(np.clip(x1 + step, 0, 1)) == 1
        x2 = data.images[1]
        assert net.predict(x2) == 1
        attempt = np.clip(x2 + 0.05 * np.sign(net.input_gradient(x2, 1)), 0, 1)
        assert net.predict(attempt) == 1  # rejected, so rho ignores x2

    def test_targeted_single_pass_matches_hand_trace(self):
        # Target class 1: x2 already lands there (skip); x1 flips into the
        # target with one descending step, so rho is exactly that step.
        net = steep_linear_net()
        data = two_point_data()
        x1 = data.images[0]
        step = -0.05 * np.sign(net.input_gradient(x1, 1))
        expected = np.clip(x1 + step, 0.0, 1.0) - x1

        pert = generate_uap(net, data, AttackBudget(math.inf, 0.2),
                            AttackParams(eps=0.05, i_max=1, mode="targeted",
                                         target=1, seed=3))
        assert np.array_equal(pert.tensor, expected)
        assert pert.provenance == "uap_targeted"
        assert net.predict(np.clip(x1 + step, 0, 1)) == 1

    def test_budget_respected_over_many_passes(self):
        net = steep_linear_net()
        data = two_point_data()
        for p in ALL_NORMS:
            budget = AttackBudget(p, 0.04)
            pert = generate_uap(net, data, budget,
                                AttackParams(eps=0.05, i_max=10, seed=1))
            assert pert.within_budget()

    def test_deterministic_given_seed(self):
        net = steep_linear_net()
        data = Dataset(RNG.uniform(0.3, 0.7, (20, 2)),
                       RNG.integers(0, 2, 20), ["a", "b"],
                       pixel_domain=(0.0, 1.0))
        a = generate_uap(net, data, AttackBudget(2.0, 0.3),
                         AttackParams(eps=0.02, i_max=4, seed=7))
        b = generate_uap(net, data, AttackBudget(2.0, 0.3),
                         AttackParams(eps=0.02, i_max=4, seed=7))
        assert np.array_equal(a.tensor, b.tensor)

    def test_shape_mismatch_rejected(self):
        net = steep_linear_net()
        bad = Dataset(np.zeros((3, 5)), np.zeros(3, dtype=int), ["a", "b"],
                      pixel_domain=(0.0, 1.0))
        with pytest.raises(ValueError, match="shape"):
            generate_uap(net, bad, AttackBudget(math.inf, 0.2),
                         AttackParams(eps=0.05, i_max=1))

    def test_out_of_range_target_rejected(self):
        net = steep_linear_net()
        with pytest.raises(ValueError, match="target"):
            generate_uap(net, two_point_data(), AttackBudget(math.inf, 0.2),
                         AttackParams(eps=0.05, i_max=1, mode="targeted",
                                      target=5))
