"""Tests for src/tools/privacy.py"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.tools.privacy import (
    PrivacyParams,
    PrivacyValidationError,
    clip,
    finite_difference_sensitivity,
    gradient_sensitivity,
    noise_multiplier_for_std,
    noise_std_for_multiplier,
    poisson_batch,
    privatize_gradient,
    shape_noise,
)
from src.tools.rng import CounterStream
from src.tools.spectral import build_mask


def params(**overrides) -> dict:
    base = dict(clip_C=1.0, sigma_w=0.1, sigma_fd=0.2, sampling_rate_q=0.01, target_epsilon=2.0, target_delta=1e-5)
    base.update(overrides)
    return base


class TestPrivacyParams:
    def test_valid(self):
        assert PrivacyParams(**params()).to_dict()["clip_C"] == 1.0

    @pytest.mark.parametrize(
        "field, value",
        [("clip_C", 0.0), ("sigma_w", -1.0), ("sampling_rate_q", 0.0), ("sampling_rate_q", 1.5),
         ("target_epsilon", 0.0), ("target_delta", 1.0)],
    )
    def test_rejects(self, field, value):
        with pytest.raises(PrivacyValidationError):
            PrivacyParams(**params(**{field: value}))

    def test_infinite_clip_allowed(self):
        assert math.isinf(PrivacyParams(**params(clip_C=math.inf)).clip_C)


class TestClip:
    def test_long_vector_scaled_to_bound(self):
        assert_allclose(clip([3.0, 4.0], 1.0), [0.6, 0.8])

    def test_short_vector_unchanged(self):
        assert_array_equal(clip([0.3, 0.4], 1.0), [0.3, 0.4])

    def test_zero_vector(self):
        assert_array_equal(clip(np.zeros(3), 1.0), np.zeros(3))

    def test_infinite_bound_is_identity(self):
        assert_array_equal(clip([30.0, 40.0], math.inf), [30.0, 40.0])

    def test_rejects_non_positive_bound(self):
        with pytest.raises(PrivacyValidationError):
            clip([1.0], 0.0)


class TestPrivatizeGradient:
    def test_noiseless_mean_of_clipped(self):
        grads = [np.array([3.0, 4.0]), np.array([0.0, 0.5])]
        g = privatize_gradient(grads, C=1.0, sigma_w=0.0, rng=CounterStream(0, "noise_w"))
        assert_allclose(g, [0.3, 0.65])

    def test_noise_added_from_stream(self):
        grads = np.zeros((4, 16))
        g = privatize_gradient(grads, C=1.0, sigma_w=0.5, rng=CounterStream(2, "noise_w"))
        assert_array_equal(g, CounterStream(2, "noise_w").normal(16, scale=0.5))

    def test_expected_batch_size_denominator(self):
        grads = np.ones((2, 1))
        g = privatize_gradient(grads, C=10.0, sigma_w=0.0, rng=CounterStream(0, "noise_w"), batch_size=4)
        assert_allclose(g, [0.5])

    def test_empty_poisson_batch_is_pure_noise(self):
        g = privatize_gradient(np.zeros((0, 8)), C=1.0, sigma_w=1.0, rng=CounterStream(0, "noise_w"), batch_size=5)
        assert_array_equal(g, CounterStream(0, "noise_w").normal(8))

    def test_empty_list_rejected(self):
        with pytest.raises(PrivacyValidationError):
            privatize_gradient([], C=1.0, sigma_w=0.1, rng=CounterStream(0, "noise_w"))

    def test_ragged_batch_rejected(self):
        with pytest.raises(PrivacyValidationError, match="differ in shape"):
            privatize_gradient([np.ones(3), np.ones(4)], C=1.0, sigma_w=0.1, rng=CounterStream(0, "noise_w"))

    def test_noise_statistics(self):
        g = privatize_gradient(np.zeros((1, 100_000)), C=1.0, sigma_w=0.3, rng=CounterStream(9, "noise_w"))
        assert np.std(g) == pytest.approx(0.3, rel=0.02)


class TestShapeNoise:
    def test_never_increases_norm(self, rng):
        mask = build_mask(64, 0.5, 0.5)
        for _ in range(20):
            w = rng.normal(64)
            assert np.linalg.norm(shape_noise(w, mask)) <= np.linalg.norm(w) * (1 + 1e-9)

    def test_shaped_energy_fraction(self, rng):
        mask = build_mask(256, 0.5, 0.5)
        w = rng.normal((4000, 256))
        ratio = np.sum(shape_noise(w, mask) ** 2) / np.sum(w**2)
        assert ratio == pytest.approx(0.625, rel=0.01)


class TestSensitivity:
    def test_gradient_sensitivity(self):
        assert gradient_sensitivity(1.0, 50) == pytest.approx(0.02)

    def test_finite_difference_sensitivity(self):
        assert finite_difference_sensitivity(1.0, 50, 2.0) == pytest.approx(0.02)

    def test_multiplier_roundtrip(self):
        assert noise_multiplier_for_std(noise_std_for_multiplier(1.5, 0.02), 0.02) == pytest.approx(1.5)

    def test_unbounded_sensitivity(self):
        assert noise_multiplier_for_std(1.0, math.inf) == 0.0


class TestPoissonBatch:
    def test_size_concentrates(self):
        idx = poisson_batch(CounterStream(0, "subsample"), 100_000, 0.01)
        assert len(idx) == pytest.approx(1000, abs=150)
        assert np.all(np.diff(idx) > 0)

    def test_full_rate(self):
        assert_array_equal(poisson_batch(CounterStream(0, "subsample"), 10, 1.0), np.arange(10))

    def test_rejects_zero_rate(self):
        with pytest.raises(PrivacyValidationError):
            poisson_batch(CounterStream(0, "subsample"), 10, 0.0)
