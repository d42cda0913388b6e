import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdlab.analytic import (
    GaussianWorldModel,
    amplification,
    amplification_ab,
    delta_t,
    estimate_sigma1,
    fit_amplification,
    joint_covariance,
    nearest_anchor,
    posterior_x0,
    scale_probe_prediction,
    sigma1_from_amplification,
)
from bdlab.tensor import ContractError, DimensionError

from oracles import SCHED, grid_posterior, schedule_with


def world_predictor(anchor, sigma1, sched):
    """eps-predictor whose x0 estimate is exactly the world-model posterior mean."""

    def f(x, t, labels):
        ab = sched.alpha_bar[np.asarray(t)][:, None]
        k = np.sqrt(ab) * sigma1**2 / (ab * sigma1**2 + 1 - ab)
        x0 = anchor + k * (x - np.sqrt(ab) * anchor)
        return (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)

    return f


class TestAmplification:
    def test_hand_value(self):
        assert amplification_ab(2.0, 0.25) == pytest.approx(8 / 7, rel=1e-12)
        assert amplification(2.0, 10, schedule_with(0.25)) == pytest.approx(8 / 7, rel=1e-12)

    def test_limits(self):
        assert amplification(0.0, 300, SCHED) == 0.0
        ab = SCHED.alpha_bar[300]
        assert amplification(np.inf, 300, SCHED) == pytest.approx(1 / np.sqrt(ab))
        assert amplification(1e6, 300, SCHED) == pytest.approx(1 / np.sqrt(ab), rel=1e-9)

    @given(st.floats(0, 100), st.floats(0, 100), st.integers(1, 1000))
    def test_monotone_and_bounded(self, a, b, t):
        lo, hi = sorted((a, b))
        ab = SCHED.alpha_bar[t]
        k_lo, k_hi = amplification(lo, t, SCHED), amplification(hi, t, SCHED)
        assert k_lo <= k_hi + 1e-15
        assert k_hi <= 1 / np.sqrt(ab) + 1e-12

    @given(st.floats(1e-3, 50), st.floats(0.01, 0.99))
    def test_inverse_round_trip(self, sigma1, ab):
        k = amplification_ab(sigma1, ab)
        assert sigma1_from_amplification(k, ab) == pytest.approx(sigma1, rel=1e-6)

    def test_inverse_clamps(self):
        assert sigma1_from_amplification(-0.3, 0.5) == 0.0
        assert sigma1_from_amplification(1 / np.sqrt(0.5), 0.5) == np.inf


class TestDelta:
    def test_on_manifold_is_zero(self, rng):
        anchor = rng.standard_normal(4)
        x_t = np.sqrt(SCHED.alpha_bar[200]) * anchor
        assert np.allclose(delta_t(x_t, anchor, 3.0, 200, SCHED), 0.0, atol=1e-15)

    def test_overfit_is_zero(self, rng):
        assert np.array_equal(delta_t(rng.standard_normal(3), rng.standard_normal(3), 0.0, 50, SCHED), np.zeros(3))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            delta_t(np.zeros(2), np.zeros(3), 1.0, 5, SCHED)


class TestPosterior:
    def test_hand_value(self):
        sched = schedule_with(0.5)
        post = posterior_x0(GaussianWorldModel(np.array([[0.0]]), 1.0, sched), np.array([1.0]), 10)
        assert post.mean[0] == pytest.approx(0.70711, abs=1e-5)
        assert post.variance == pytest.approx(0.5, abs=1e-12)
        mean, var = grid_posterior(1.0, 0.0, 1.0, 0.5)
        assert post.mean[0] == pytest.approx(mean, abs=1e-3)
        assert post.variance == pytest.approx(var, abs=1e-3)

    def test_on_manifold_mean(self, rng):
        anchor = rng.standard_normal(3)
        for s1 in (0.0, 0.5, 7.0):
            wm = GaussianWorldModel(anchor, s1, SCHED)
            post = posterior_x0(wm, np.sqrt(SCHED.alpha_bar[400]) * anchor, 400)
            assert np.allclose(post.mean, anchor, atol=1e-12)

    @given(st.floats(0.0, 1e3), st.integers(1, 1000))
    def test_variance_ratio_in_unit_interval(self, s1, t):
        post = posterior_x0(GaussianWorldModel(np.zeros((1, 2)), s1, SCHED), np.ones(2), t)
        assert 0 < post.variance_ratio <= 1
        assert post.variance == pytest.approx(s1**2 * post.variance_ratio)

    def test_variance_ratio_vanishes(self):
        ratios = [posterior_x0(GaussianWorldModel(np.zeros(1), s, SCHED), np.zeros(1), 300).variance_ratio for s in (1, 10, 100, 1e4)]
        assert np.all(np.diff(ratios) < 0) and ratios[-1] < 1e-6

    @pytest.mark.parametrize("sigma1", [0.1, 1.0])
    @pytest.mark.parametrize("ab", [0.1, 0.5, 0.9])
    @pytest.mark.parametrize("x_t, anchor", [(1.0, 0.0), (0.5, 0.3), (-0.7, 0.2)])
    def test_matches_grid(self, sigma1, ab, x_t, anchor):
        post = posterior_x0(GaussianWorldModel(np.array([[anchor]]), sigma1, schedule_with(ab)), np.array([x_t]), 10)
        mean, var = grid_posterior(x_t, anchor, sigma1, ab)
        assert post.mean[0] == pytest.approx(mean, abs=1e-3)
        assert post.variance == pytest.approx(var, abs=1e-3)

    @pytest.mark.parametrize("ab", [0.5, 0.9])
    def test_matches_grid_wide_prior(self, ab):
        # sigma1 = 10 is checked where the posterior sits well inside [-10, 10]
        post = posterior_x0(GaussianWorldModel(np.array([[0.2]]), 10.0, schedule_with(ab)), np.array([0.5]), 10)
        mean, var = grid_posterior(0.5, 0.2, 10.0, ab)
        assert post.mean[0] == pytest.approx(mean, abs=1e-3)
        assert post.variance == pytest.approx(var, abs=1e-3)

    @given(st.floats(0.05, 5), st.floats(0.05, 0.95), st.floats(-3, 3))
    def test_conditioning_joint_covariance(self, s1, ab, x_t):
        # condition the 2x2 joint (zero-mean anchor) on x_t
        sched = schedule_with(ab)
        cov = joint_covariance(GaussianWorldModel(np.zeros(1), s1, sched), 10)
        mean = cov[0, 1] / cov[1, 1] * x_t
        var = cov[0, 0] - cov[0, 1] ** 2 / cov[1, 1]
        post = posterior_x0(GaussianWorldModel(np.zeros(1), s1, sched), np.array([x_t]), 10)
        assert post.mean[0] == pytest.approx(mean, rel=1e-9, abs=1e-12)
        assert post.variance == pytest.approx(var, rel=1e-9, abs=1e-12)

    def test_joint_covariance_overfit(self):
        cov = joint_covariance(GaussianWorldModel(np.zeros(1), 0.0, SCHED), 100)
        assert np.allclose(cov, [[0, 0], [0, 1 - SCHED.alpha_bar[100]]])

    def test_empty_anchors(self):
        with pytest.raises(ContractError):
            GaussianWorldModel(np.zeros((0, 2)), 1.0, SCHED)

    def test_negative_sigma(self):
        with pytest.raises(ContractError):
            GaussianWorldModel(np.zeros(2), -1.0, SCHED)


class TestNearestAnchor:
    def test_singleton(self, rng):
        assert nearest_anchor(GaussianWorldModel(rng.standard_normal(3), 1.0, SCHED), rng.standard_normal(3), 5) == 0

    def test_exact_hit(self, rng):
        anchors = rng.standard_normal((5, 3))
        wm = GaussianWorldModel(anchors, 1.0, SCHED)
        assert nearest_anchor(wm, np.sqrt(SCHED.alpha_bar[250]) * anchors[3], 250) == 3

    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 10), st.integers(1, 1000))
    @settings(max_examples=50)
    def test_matches_brute_force(self, seed, s1, t):
        rng = np.random.default_rng(seed)
        anchors = rng.standard_normal((6, 3))
        x_t = rng.standard_normal(3)
        norms = [np.linalg.norm(delta_t(x_t, a, s1, t, SCHED)) for a in anchors]
        assert nearest_anchor(GaussianWorldModel(anchors, s1, SCHED), x_t, t) == int(np.argmin(norms))

    @given(st.integers(0, 2**31 - 1), st.lists(st.integers(0, 3), min_size=1, max_size=5))
    @settings(max_examples=50)
    def test_duplicates_do_not_change_choice(self, seed, dup):
        rng = np.random.default_rng(seed)
        anchors = rng.standard_normal((4, 2))
        x_t = rng.standard_normal(2)
        j = nearest_anchor(GaussianWorldModel(anchors, 1.0, SCHED), x_t, 100)
        extended = np.vstack([anchors, anchors[dup]])
        assert nearest_anchor(GaussianWorldModel(extended, 1.0, SCHED), x_t, 100) == j


class TestEstimateSigma1:
    def test_recovers_world_model(self):
        sched = schedule_with(0.25)
        anchor = np.array([0.4, -1.0, 0.7])
        s1 = estimate_sigma1(world_predictor(anchor, 2.0, sched), anchor, 10, 64, 0, sched)
        assert s1**2 == pytest.approx(4.0, rel=1e-9)

    @pytest.mark.parametrize("sigma1", [0.05, 0.5, 3.0])
    def test_recovers_on_default_schedule(self, sigma1):
        anchor = np.array([1.0, 0.5])
        assert estimate_sigma1(world_predictor(anchor, sigma1, SCHED), anchor, 300, 32, 0, SCHED) == pytest.approx(sigma1, rel=1e-6)

    def test_overfit_model(self):
        anchor = np.array([0.3, 0.3])
        # round-off in the eps round trip leaves k at ~1e-16, i.e. sigma1 ~ 1e-8
        assert estimate_sigma1(world_predictor(anchor, 0.0, SCHED), anchor, 500, 16, 0, SCHED) < 1e-6

    def test_fit_amplification(self, rng):
        anchor = rng.standard_normal(4)
        x_t = rng.standard_normal((3, 4))
        ab = 0.3
        x0_hat = anchor + 0.7 * (x_t - np.sqrt(ab) * anchor)
        assert np.allclose(fit_amplification(x_t, x0_hat, anchor, ab), 0.7)

    def test_contracts(self):
        with pytest.raises(ContractError):
            estimate_sigma1(world_predictor(np.zeros(2), 1.0, SCHED), np.zeros(2), 0, 8, 0, SCHED)
        with pytest.raises(ContractError):
            estimate_sigma1(world_predictor(np.zeros(2), 1.0, SCHED), np.zeros(2), 5, 0, 0, SCHED)


class TestScaleProbePrediction:
    def test_on_manifold(self, rng):
        anchor = rng.standard_normal(3)
        wm = GaussianWorldModel(anchor, 2.5, SCHED)
        assert np.allclose(scale_probe_prediction(wm, np.sqrt(SCHED.alpha_bar[300]), 300), anchor)

    def test_zero_input(self, rng):
        anchor = rng.standard_normal(3)
        wm = GaussianWorldModel(anchor, 2.5, SCHED)
        k = amplification(2.5, 1000, SCHED)
        expected = (1 - k * np.sqrt(SCHED.alpha_bar[1000])) * anchor
        assert np.allclose(scale_probe_prediction(wm, 0.0, 1000), expected)

    @given(st.floats(-5, 5))
    def test_overfit_returns_anchor(self, k):
        anchor = np.array([0.5, -0.25])
        assert np.allclose(scale_probe_prediction(GaussianWorldModel(anchor, 0.0, SCHED), k, 300), anchor)

    def test_matches_posterior_mean(self, rng):
        anchor = rng.standard_normal(3)
        wm = GaussianWorldModel(anchor, 1.3, SCHED)
        assert np.allclose(scale_probe_prediction(wm, 0.6, 200), posterior_x0(wm, 0.6 * anchor, 200).mean)

    def test_multi_anchor(self):
        with pytest.raises(ContractError):
            scale_probe_prediction(GaussianWorldModel(np.zeros((2, 2)), 1.0, SCHED), 0.5, 10)
