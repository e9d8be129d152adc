"""Tests for src/tools/kalman.py"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.tools import kalman
from src.tools.kalman import KalmanState, KalmanValidationError
from src.tools.rng import CounterStream


@pytest.fixture
def quadratic(rng):
    d = 12
    q, _ = np.linalg.qr(rng.normal((d, d)))
    A = q @ np.diag(np.linspace(0.1, 2.0, d)) @ q.T
    return A, rng.normal(d)


def fd_stream():
    return CounterStream(0, "noise_fd")


class TestKalmanState:
    def test_initial_state_is_zero(self):
        state = kalman.initial_state(5, 0.5, 1.0)
        assert_array_equal(state.g_tilde, np.zeros(5))
        assert_array_equal(state.d_prev, np.zeros(5))
        assert not state.initialized
        assert state.d == 5

    @pytest.mark.parametrize("kappa", [0.0, -0.1, 1.5])
    def test_rejects_kappa(self, kappa):
        with pytest.raises(KalmanValidationError):
            kalman.initial_state(3, kappa, 1.0)

    def test_kappa_one_accepted(self):
        assert kalman.initial_state(3, 1.0, 1.0).kappa == 1.0

    def test_rejects_gamma(self):
        with pytest.raises(KalmanValidationError):
            kalman.initial_state(3, 0.5, 0.0)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(KalmanValidationError):
            KalmanState(g_tilde=np.zeros(3), d_prev=np.zeros(4), kappa=0.5, gamma=1.0)


class TestPredict:
    def test_zero_step_returns_previous_estimate(self, rng):
        g_tilde = rng.normal(6)
        state = KalmanState(g_tilde=g_tilde, d_prev=np.zeros(6), kappa=0.5, gamma=2.0)
        grads = rng.normal((4, 6))
        assert_array_equal(kalman.predict(state, grads, grads.copy(), 1.0, 0.0, fd_stream()), g_tilde)

    def test_quadratic_finite_difference_is_exact(self, quadratic, rng):
        A, x_star = quadratic
        x, d_prev, g_prev = rng.normal(12), rng.normal(12), rng.normal(12)
        gamma, B = 0.7, 3
        state = KalmanState(g_tilde=g_prev, d_prev=d_prev, kappa=0.5, gamma=gamma)
        at_x = np.tile(A @ (x - x_star), (B, 1))
        at_shifted = np.tile(A @ (x + gamma * d_prev - x_star), (B, 1))
        pred = kalman.predict(state, at_x, at_shifted, math.inf, 0.0, fd_stream())
        assert_allclose(pred, g_prev + A @ d_prev, atol=1e-9)

    def test_exact_tracking_on_quadratic(self, quadratic, rng):
        A, x_star = quadratic
        x_prev = rng.normal(12)
        x = x_prev + 0.1 * rng.normal(12)
        state = KalmanState(g_tilde=A @ (x_prev - x_star), d_prev=x - x_prev, kappa=0.5, gamma=1.0)
        pred = kalman.predict(
            state, [A @ (x - x_star)], [A @ (x + (x - x_prev) - x_star)], math.inf, 0.0, fd_stream()
        )
        assert np.linalg.norm(pred - A @ (x - x_star)) <= 1e-9

    def test_unit_gamma_is_mean_difference(self, rng):
        state = KalmanState(g_tilde=np.zeros(4), d_prev=np.ones(4), kappa=0.5, gamma=1.0)
        at_x, at_shifted = rng.normal((5, 4)) * 0.1, rng.normal((5, 4)) * 0.1
        pred = kalman.predict(state, at_x, at_shifted, 10.0, 0.0, fd_stream())
        assert_allclose(pred, at_shifted.mean(axis=0) - at_x.mean(axis=0), atol=1e-14)

    def test_noise_from_fd_stream(self):
        state = kalman.initial_state(8, 0.5, 1.0)
        grads = np.zeros((2, 8))
        pred = kalman.predict(state, grads, grads, 1.0, 0.3, CounterStream(5, "noise_fd"))
        assert_array_equal(pred, CounterStream(5, "noise_fd").normal(8, scale=0.3))

    def test_batch_mismatch(self):
        state = kalman.initial_state(3, 0.5, 1.0)
        with pytest.raises(KalmanValidationError, match="Batch mismatch"):
            kalman.predict(state, np.zeros((2, 3)), np.zeros((3, 3)), 1.0, 0.0, fd_stream())

    def test_length_mismatch(self):
        state = kalman.initial_state(3, 0.5, 1.0)
        with pytest.raises(KalmanValidationError):
            kalman.predict(state, np.zeros((2, 4)), np.zeros((2, 4)), 1.0, 0.0, fd_stream())


class TestCorrect:
    def test_fixed_point(self, rng):
        p = rng.normal(5)
        state = kalman.initial_state(5, 0.3, 1.0)
        assert_allclose(kalman.correct(state, p, p), p)

    def test_midpoint(self):
        state = kalman.initial_state(2, 0.5, 1.0)
        assert_allclose(kalman.correct(state, [2.0, 0.0], [0.0, 2.0]), [1.0, 1.0])

    def test_geometric_convergence(self):
        kappa = 0.5
        state = kalman.initial_state(3, kappa, 1.0)
        target = np.array([1.0, -2.0, 3.0])
        g = np.zeros(3)
        for _ in range(50):
            g = kalman.correct(state, g, target)
        assert_allclose(g, target, atol=1e-6)

    def test_geometric_rate(self):
        state = kalman.initial_state(2, 0.25, 1.0)
        target = np.array([4.0, -1.0])
        g = np.zeros(2)
        for _ in range(10):
            g = kalman.correct(state, g, target)
        assert_allclose(g, (1 - 0.75**10) * target, rtol=1e-12)

    def test_convex_combination(self, rng):
        state = kalman.initial_state(20, 0.37, 1.0)
        p, g = rng.normal(20), rng.normal(20)
        out = kalman.correct(state, p, g)
        assert np.all(out >= np.minimum(p, g) - 1e-15)
        assert np.all(out <= np.maximum(p, g) + 1e-15)

    def test_unit_gain_returns_observation(self, rng):
        g = rng.normal(4)
        assert_array_equal(kalman.correct(kalman.initial_state(4, 1.0, 1.0), rng.normal(4), g), g)

    def test_length_mismatch(self):
        with pytest.raises(KalmanValidationError):
            kalman.correct(kalman.initial_state(2, 0.5, 1.0), [1.0, 2.0], [1.0, 2.0, 3.0])


class TestAdvance:
    def test_stores_values(self):
        state = kalman.advance(kalman.initial_state(2, 0.5, 1.0), [1.0, 2.0], [0.1, 0.2])
        assert_array_equal(state.g_tilde, [1.0, 2.0])
        assert_array_equal(state.d_prev, [0.1, 0.2])
        assert state.initialized

    def test_last_writer_wins(self):
        base = kalman.initial_state(1, 0.5, 1.0)
        ab = kalman.advance(kalman.advance(base, [1.0], [1.0]), [2.0], [2.0])
        ba = kalman.advance(kalman.advance(base, [2.0], [2.0]), [1.0], [1.0])
        assert ab.g_tilde[0] == 2.0 and ba.g_tilde[0] == 1.0

    def test_original_state_untouched(self):
        base = kalman.initial_state(2, 0.5, 1.0)
        kalman.advance(base, [1.0, 1.0], [1.0, 1.0])
        assert_array_equal(base.g_tilde, np.zeros(2))
