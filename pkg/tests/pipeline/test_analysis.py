"""Tests for src/pipeline/analysis.py"""

import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from src.pipeline.analysis import (
    bound_terms,
    c1,
    c1_exact,
    noise_reduction_report,
    operator_norm_minus_identity,
    rho_star,
    rho_star_exact,
    theorem2_constants,
    trace_convergence_study,
    verify_lemma1,
    verify_spectral_covariance,
)
from src.tools.rng import CounterStream
from src.tools.spectral import build_mask, identity_mask


class TestRhoStar:
    def test_reference_point(self):
        assert rho_star(0.5, 0.5, 1024) == 0.625
        assert rho_star(0.5, 0.5) == 0.625

    def test_no_shaping(self):
        assert rho_star(0.3, 0.0, 64) == 1.0

    def test_quarter_pivot(self):
        assert rho_star(0.25, 0.5, 8) == 0.4375

    def test_exact_rational(self):
        assert rho_star_exact(0.5, 0.9) == Fraction(101, 200)

    @pytest.mark.parametrize("lam, rho", [(0.0, 0.5), (1.0, 0.5), (0.5, 1.0), (0.5, -0.1)])
    def test_rejects_out_of_range(self, lam, rho):
        with pytest.raises(ValueError):
            rho_star(lam, rho)

    def test_matches_mask_energy(self):
        mask = build_mask(256, 0.3, 0.4)
        assert rho_star(0.3, 0.4, 256) == pytest.approx(float((mask.phi**2).mean()), rel=1e-12)


class TestNoiseReduction:
    def test_reference_point(self):
        assert noise_reduction_report(0.5, 0.5) == (37.5, 25.0)

    def test_no_shaping(self):
        assert noise_reduction_report(0.5, 0.0) == (0.0, 0.0)

    def test_strong_shaping(self):
        assert noise_reduction_report(0.5, 0.9) == (49.5, 81.0)


class TestTheorem2:
    def test_unit_gain(self):
        assert c1(0.05, 1.0, 3.0, 2.0, 0.7) == pytest.approx(2 - 2 * 0.05 * 2.0)

    def test_vanishing_step(self):
        assert c1(1e-12, 0.4, 1.0, 1.0, 0.1) == pytest.approx(1.4)

    def test_dual_evaluation(self):
        assert c1(0.01, 0.5, 1.0, 1.0, 0.1) == pytest.approx(float(c1_exact(0.01, 0.5, 1.0, 1.0, 0.1)), rel=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(1e-4, 0.2),
        st.floats(1e-3, 1.0),
        st.floats(-2.0, 2.0),
        st.floats(0.1, 2.0),
        st.floats(0.0, 1.0),
    )
    def test_dual_evaluation_property(self, eta, kappa, gamma, L, beta):
        exact = float(c1_exact(eta, kappa, gamma, L, beta))
        assert abs(c1(eta, kappa, gamma, L, beta) - exact) <= 1e-12 * max(abs(exact), 1.0)

    def test_constants(self):
        constants = theorem2_constants(0.01, 0.5, 1.0, 1.0, 0.1)
        assert constants.valid
        assert constants.rho_star == 0.625
        assert constants.bias_coefficient == 0.25
        expected_noise = 2 * (0.1 + 0.01**2) * 0.25 / (constants.C1 * 0.01)
        assert constants.noise_coefficient == pytest.approx(expected_noise)
        assert constants.dp_term_multiplier == pytest.approx(4 * 0.625)

    def test_dp_term_scales_with_dimension(self):
        constants = theorem2_constants(0.01, 0.5, 1.0, 1.0, 0.1, d=1024, sigma_w=0.5)
        assert constants.dp_term_multiplier == pytest.approx(4 * 0.625 * 1024 * 0.25)

    def test_invalid_c1(self):
        constants = theorem2_constants(1.0, 0.1, 1.0, 1.0, 0.5)
        assert not constants.valid
        assert math.isnan(constants.noise_coefficient)
        assert math.isnan(bound_terms(constants, 1.0, 1.0, 100).optimization)

    def test_bound_terms_shrink_with_horizon(self):
        constants = theorem2_constants(0.01, 0.5, 1.0, 1.0, 0.1)
        short = bound_terms(constants, 2.0, 1.0, 100)
        long = bound_terms(constants, 2.0, 1.0, 10_000)
        assert long.optimization == pytest.approx(short.optimization / 100)
        assert long.noise == short.noise

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            theorem2_constants(0.0, 0.5, 1.0, 1.0, 0.1)

    def test_rejects_negative_gamma(self):
        with pytest.raises(ValueError, match="gamma"):
            theorem2_constants(0.01, 0.5, -0.5, 1.0, 0.1)
        assert theorem2_constants(0.01, 0.5, 0.0, 1.0, 0.1).valid


class TestLemma1:
    def test_identity_mask(self):
        report = verify_lemma1(128, 0.5, 0.0, 0.5, 4000, CounterStream(0, "analysis"))
        assert report.trace_rel_error <= 0.02
        assert report.trace_analytic == pytest.approx(128 * 0.25)
        assert report.bias_norm_mc == 0.0

    def test_step_mask(self):
        report = verify_lemma1(256, 0.5, 0.5, 1.0, 20_000, CounterStream(1, "analysis"))
        assert report.rho_star_analytic == 0.625
        assert report.trace_rel_error <= 0.02
        assert report.bias_norm_mc == pytest.approx(0.5, abs=1e-6)
        assert report.mean_norm < report.mean_bound

    @pytest.mark.slow
    def test_reference_dimension(self):
        report = verify_lemma1(1024, 0.5, 0.5, 1.0, 100_000, CounterStream(2, "analysis"))
        assert report.trace_mc == pytest.approx(640, rel=0.02)
        assert report.bias_norm_mc == pytest.approx(0.5, abs=1e-6)

    def test_power_iteration_on_smooth_mask(self):
        mask = build_mask(64, 0.25, 0.6, alpha=0.5)
        assert operator_norm_minus_identity(mask, CounterStream(3, "analysis"), iterations=500) == pytest.approx(
            0.6, rel=1e-3
        )

    def test_power_iteration_identity(self):
        assert operator_norm_minus_identity(identity_mask(32), CounterStream(0, "analysis")) == 0.0


def test_spectral_covariance():
    report = verify_spectral_covariance(build_mask(64, 0.5, 0.5), 1.0, 20_000, CounterStream(4, "analysis"))
    assert report.max_rel_error < 0.06


@pytest.mark.slow
def test_trace_estimate_converges_at_root_n():
    study = trace_convergence_study(
        64, 0.5, 0.5, 1.0, CounterStream(5, "analysis"), sample_sizes=(500, 2000, 8000), repeats=32
    )
    assert study.fitted_exponent == pytest.approx(-0.5, abs=0.2)
