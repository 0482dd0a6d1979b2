import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lastiterate.accountant import (
    PrivacyPoint,
    SgdParams,
    ShiftMixture,
    binomial_gaussian_pair,
    delta_from_epsilon,
    epsilon_curve,
    epsilon_from_delta,
    heuristic_delta,
    heuristic_epsilon,
    heuristic_sweep_max,
    hockey_stick_pq,
    hockey_stick_qp,
    inverse_privacy_loss,
    privacy_loss_at,
    sweep_steps,
)

from oracles import binomial_atoms, mixture_densities, trapezoid_delta

DELTA = 1e-6


class TestParams:
    @pytest.mark.parametrize(
        "kwargs", [dict(T=0, q=0.1, sigma=1), dict(T=1, q=1.5, sigma=1), dict(T=1, q=0.1, sigma=0), dict(T=2.5, q=0.1, sigma=1)]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SgdParams(**kwargs)

    def test_privacy_point(self):
        with pytest.raises(ValueError):
            PrivacyPoint(-1.0, 1e-6)


class TestPair:
    def test_never_sampled(self):
        mix = binomial_gaussian_pair(SgdParams(1, 0.0, 1.0))
        assert mix.variance == 1.0
        assert mix.atoms == [(0.0, 1.0)]

    def test_bernoulli(self):
        mix = binomial_gaussian_pair(SgdParams(1, 0.1, 1.0))
        np.testing.assert_allclose(mix.shifts, [0, 1])
        np.testing.assert_allclose(mix.probs, [0.9, 0.1], rtol=1e-14)

    def test_three_steps(self):
        mix = binomial_gaussian_pair(SgdParams(3, 0.1, 1.0))
        assert mix.variance == 3.0
        np.testing.assert_allclose(mix.probs, [0.729, 0.243, 0.027, 0.001], rtol=1e-12)

    def test_truncation_large_t(self):
        mix = binomial_gaussian_pair(SgdParams(5000, 0.01, 1.0))
        assert mix.shifts.size < 5001
        assert mix.probs.sum() == pytest.approx(1.0, abs=1e-12)
        _, exact = binomial_atoms(5000, 0.01)
        kept = exact[mix.shifts.astype(int)]
        np.testing.assert_allclose(mix.probs, kept / kept.sum(), rtol=1e-9)

    def test_invalid_mixture(self):
        with pytest.raises(ValueError):
            ShiftMixture(1.0, np.array([0.0, 1.0]), np.log([0.5, 0.4]))
        with pytest.raises(ValueError):
            ShiftMixture(1.0, np.array([1.0, 0.0]), np.log([0.5, 0.5]))


class TestPrivacyLoss:
    def test_trivial(self):
        mix = ShiftMixture(1.0, np.array([0.0]), np.array([0.0]))
        assert privacy_loss_at(mix, 3.7) == 0.0

    def test_single_atom(self):
        mix = ShiftMixture(2.0, np.array([1.0]), np.array([0.0]))
        for y in (-3.0, 0.0, 0.5, 4.0):
            assert privacy_loss_at(mix, y) == pytest.approx((2 * y - 1) / 4.0)

    def test_left_limit(self):
        mix = binomial_gaussian_pair(SgdParams(3, 0.1, 1.0))
        # at y=-50 the k=1 term still contributes ~e^-16.8 relative to k=0
        assert privacy_loss_at(mix, -50.0) == pytest.approx(3 * math.log(0.9), abs=1e-7)
        assert privacy_loss_at(mix, -500.0) == pytest.approx(3 * math.log(0.9), abs=1e-14)
        assert mix.loss_infimum == pytest.approx(3 * math.log(0.9), rel=1e-14)

    def test_inverse_examples(self):
        mix = ShiftMixture(1.0, np.array([1.0]), np.array([0.0]))
        assert inverse_privacy_loss(mix, 0.0) == pytest.approx(0.5, abs=1e-12)
        mix3 = binomial_gaussian_pair(SgdParams(3, 0.1, 1.0))
        assert inverse_privacy_loss(mix3, -10.0) is None
        y = inverse_privacy_loss(mix3, 2.222)
        assert privacy_loss_at(mix3, y) == pytest.approx(2.222, abs=1e-10)

    def test_inverse_trivial_raises(self):
        with pytest.raises(ValueError):
            inverse_privacy_loss(ShiftMixture(1.0, np.array([0.0]), np.array([0.0])), 1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 60), st.floats(0.001, 1.0), st.floats(0.3, 5.0), st.floats(-20, 20))
    def test_round_trip(self, T, q, sigma, y):
        mix = binomial_gaussian_pair(SgdParams(T, q, sigma))
        y = y * mix.std + 0.5 * T * q
        target = privacy_loss_at(mix, y)
        if not math.isfinite(target) or target <= mix.loss_infimum + 1e-9:
            return
        assert inverse_privacy_loss(mix, target) == pytest.approx(y, abs=1e-9 * max(1.0, abs(y), mix.std))

    def test_round_trip_example(self):
        mix = binomial_gaussian_pair(SgdParams(7, 0.3, 1.3))
        assert inverse_privacy_loss(mix, privacy_loss_at(mix, 7.3)) == pytest.approx(7.3, abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40), st.floats(0.01, 0.99), st.floats(0.3, 4.0))
    def test_loss_increasing(self, T, q, sigma):
        mix = binomial_gaussian_pair(SgdParams(T, q, sigma))
        ys = np.linspace(-5 * mix.std, T + 5 * mix.std, 200)
        f = np.array([privacy_loss_at(mix, y) for y in ys])
        assert np.all(np.diff(f) > 0)


class TestHockeyStick:
    def test_trivial(self):
        mix = ShiftMixture(1.0, np.array([0.0]), np.array([0.0]))
        assert hockey_stick_pq(mix, 0.5) == 0.0
        assert hockey_stick_qp(mix, 0.5) == 0.0

    def test_total_variation(self):
        mix = binomial_gaussian_pair(SgdParams(1, 0.1, 1.0))
        tv = 0.1 * (2 * stats.norm.cdf(0.5) - 1)
        assert hockey_stick_pq(mix, 0.0) == pytest.approx(tv, rel=1e-10)
        assert hockey_stick_qp(mix, 0.0) == pytest.approx(tv, rel=1e-10)

    def test_qp_sentinel(self):
        mix = binomial_gaussian_pair(SgdParams(3, 0.1, 1.0))
        assert hockey_stick_qp(mix, 1.0) == 0.0

    @pytest.mark.parametrize("T,q,sigma", [(1, 0.1, 1.0), (3, 0.1, 1.0), (5, 0.5, 0.7), (10, 0.01, 2.0)])
    @pytest.mark.parametrize("eps", [0.0, 0.5, 1.0, 2.0])
    def test_against_trapezoid(self, T, q, sigma, eps):
        shifts, probs = binomial_atoms(T, q)
        y, p, qd = mixture_densities(shifts, probs, T * sigma**2)
        mix = binomial_gaussian_pair(SgdParams(T, q, sigma))
        assert delta_from_epsilon(mix, eps) == pytest.approx(trapezoid_delta(y, p, qd, eps), abs=1e-7)


class TestEpsilon:
    def test_reported_values(self):
        assert heuristic_epsilon(SgdParams(3, 0.1, 1.0), DELTA) == pytest.approx(2.222, abs=0.005)
        assert heuristic_epsilon(SgdParams(1, 0.1, 1.0), DELTA) == pytest.approx(2.182, abs=0.005)

    def test_delta_at_reported_epsilon(self):
        d = heuristic_delta(SgdParams(3, 0.1, 1.0), 2.222)
        assert 0.5e-6 < d < 2e-6

    def test_zero_rate(self):
        assert heuristic_epsilon(SgdParams(10, 0.0, 1.0), DELTA) == 0.0
        assert heuristic_delta(SgdParams(10, 0.0, 1.0), 0.0) == 0.0

    def test_result_satisfies_delta(self):
        mix = binomial_gaussian_pair(SgdParams(20, 0.2, 0.8))
        eps = epsilon_from_delta(mix, DELTA)
        assert delta_from_epsilon(mix, eps) <= DELTA
        assert delta_from_epsilon(mix, eps - 2e-6) > DELTA

    def test_bad_delta(self):
        with pytest.raises(ValueError):
            heuristic_epsilon(SgdParams(1, 0.1, 1.0), 0.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 50), st.floats(0.01, 1.0), st.floats(0.4, 4.0))
    def test_delta_decreasing_in_epsilon(self, T, q, sigma):
        mix = binomial_gaussian_pair(SgdParams(T, q, sigma))
        d = [delta_from_epsilon(mix, e) for e in np.linspace(0, 6, 13)]
        assert all(b <= a + 1e-15 for a, b in zip(d, d[1:]))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 50), st.floats(0.01, 1.0), st.floats(0.4, 4.0), st.floats(1e-8, 1e-2))
    def test_epsilon_delta_round_trip(self, T, q, sigma, delta):
        params = SgdParams(T, q, sigma)
        eps = heuristic_epsilon(params, delta)
        if eps > 0:
            assert heuristic_delta(params, eps) <= delta * (1 + 1e-9)
            assert heuristic_delta(params, max(0.0, eps - 1e-5)) >= delta * (1 - 1e-9)

    def test_large_t_runs(self):
        eps = heuristic_epsilon(SgdParams(10_000, 0.01, 1.0), DELTA)
        assert 0 < eps < 20


class TestSweep:
    def test_steps(self):
        assert sweep_steps(5) == [1, 2, 3, 4, 5]
        steps = sweep_steps(10_000)
        assert steps[:100] == list(range(1, 101))
        assert steps[-1] == 10_000
        assert all(b > a for a, b in zip(steps, steps[1:]))

    def test_sweep_max_at_least_final(self):
        params = SgdParams(3, 0.1, 1.0)
        best, t = heuristic_sweep_max(params, DELTA)
        assert best >= heuristic_epsilon(params, DELTA)
        curve = epsilon_curve(params, DELTA, [1, 2, 3])
        assert best == curve.max()
        assert t == int(np.argmax(curve)) + 1
