#!/usr/bin/env python3
"""
Analysis - numerical checks of the shaping and filtering theory

Calculators:
    rho_star                 effective noise-energy fraction after shaping
    noise_reduction_report   (% noise removed, % bias inflation)
    theorem2_constants       C1 and the coefficients of the utility bound

Monte-Carlo verifiers:
    verify_lemma1               trace of Cov[shaped noise] and ||A - I||_2
    verify_spectral_covariance  per-bin variance sigma_w^2 d phi_k^2
    trace_convergence_study     1/sqrt(n) decay of the trace estimate

Usage:
    from src.pipeline.analysis import rho_star, verify_lemma1

    rho_star(0.5, 0.5, 1024)            # 0.625
    report = verify_lemma1(1024, 0.5, 0.5, 1.0, 100_000, CounterStream(0, "analysis"))
    print(report.trace_rel_error, report.bias_norm_mc)
"""

import logging
import math
from dataclasses import dataclass, asdict, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from src.tools.rng import CounterStream
from src.tools.spectral import SpectralMask, apply_filter, build_mask, dft_forward, identity_mask, pivot_index

logger = logging.getLogger(__name__)

POWER_ITERATIONS = 30
POWER_TOLERANCE = 1e-8
SAMPLE_CHUNK = 4096


def _exact(x: float) -> Fraction:
    """Decimal value of a float as typed (0.9 -> 9/10)."""
    return Fraction(repr(float(x)))


def _check_lam_rho(lam: float, rho: float) -> None:
    if not 0 < lam < 1:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    if not 0 <= rho < 1:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")


# ============================================================================
# Closed forms
# ============================================================================

def rho_star_exact(lam: float, rho: float, d: Optional[int] = None) -> Fraction:
    """
    (k0 + (1 - rho)^2 (d - k0)) / d with k0 = floor(lam d).

    Without d the continuum limit lam + (1 - rho)^2 (1 - lam) is returned.
    """
    _check_lam_rho(lam, rho)
    keep = (1 - _exact(rho)) ** 2
    if d is None:
        lam_f = _exact(lam)
        return lam_f + keep * (1 - lam_f)
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    k0 = pivot_index(d, lam)
    return (k0 + keep * (d - k0)) / d


def rho_star(lam: float, rho: float, d: Optional[int] = None) -> float:
    return float(rho_star_exact(lam, rho, d))


def noise_reduction_report(lam: float, rho: float, d: Optional[int] = None) -> tuple[float, float]:
    """(reduction %, bias inflation %) = (100 (1 - rho*), 100 rho^2)"""
    reduction = (1 - rho_star_exact(lam, rho, d)) * 100
    inflation = _exact(rho) ** 2 * 100
    return float(reduction), float(inflation)


@dataclass(frozen=True)
class Theorem2Constants:
    """
    Constants of the utility bound

        (1/T) sum E||grad F||^2 <= 2 (F0 - F* + beta ||grad F0||^2) / (C1 eta T)
            + noise_coefficient [ (2 + |1 + gamma|) rho* d sigma_w^2 + sigma_SGD^2 / B ]
            + rho^2 G_T

    beta and L are inputs; the assumptions that define them are not modelled.
    """
    eta: float
    kappa: float
    gamma: float
    L: float
    beta: float
    rho: float
    rho_star: float
    C1: float
    noise_coefficient: float
    bias_coefficient: float
    dp_term_multiplier: float
    valid: bool

    def to_dict(self) -> dict:
        return asdict(self)


def c1(eta: float, kappa: float, gamma: float, L: float, beta: float) -> float:
    """(1 + kappa - 2 eta L) - 4 (beta + eta^2 L)(1 - kappa)^2 L^2 eta (2 + |1 + gamma|)"""
    return (1 + kappa - 2 * eta * L) - 4 * (beta + eta**2 * L) * (1 - kappa) ** 2 * L**2 * eta * (2 + abs(1 + gamma))


def c1_exact(eta: float, kappa: float, gamma: float, L: float, beta: float) -> Fraction:
    """C1 in rational arithmetic, expanded term by term."""
    e, k, g, l, b = (Fraction(v) for v in (eta, kappa, gamma, L, beta))
    spread = 2 + abs(1 + g)
    lead = 1 + k - 2 * e * l
    return lead - 4 * spread * (b * e * l**2 + e**3 * l**3) * (1 - 2 * k + k * k)


def theorem2_constants(
    eta: float,
    kappa: float,
    gamma: float,
    L: float,
    beta: float,
    rho: float = 0.5,
    lam: float = 0.5,
    d: Optional[int] = None,
    sigma_w: Optional[float] = None,
) -> Theorem2Constants:
    """
    Evaluate C1 and the bound coefficients.

    dp_term_multiplier is (2 + |1 + gamma|) rho* d sigma_w^2; d sigma_w^2 is
    taken as 1 unless both are given. A non-positive C1 is reported with
    valid=False and NaN coefficients.
    """
    if eta <= 0 or kappa <= 0 or L <= 0 or beta < 0 or gamma < 0:
        raise ValueError("eta, kappa and L must be > 0, beta and gamma >= 0")
    value = c1(eta, kappa, gamma, L, beta)
    valid = value > 0
    r_star = rho_star(lam, rho, d) if rho > 0 else 1.0
    scale = d * sigma_w**2 if (d is not None and sigma_w is not None) else 1.0
    noise = 2 * (beta + eta**2 * L) * kappa**2 / (value * eta) if valid else math.nan
    return Theorem2Constants(
        eta=eta,
        kappa=kappa,
        gamma=gamma,
        L=L,
        beta=beta,
        rho=rho,
        rho_star=r_star,
        C1=value,
        noise_coefficient=noise,
        bias_coefficient=rho**2,
        dp_term_multiplier=(2 + abs(1 + gamma)) * r_star * scale,
        valid=valid,
    )


@dataclass(frozen=True)
class BoundTerms:
    optimization: float
    noise: float
    bias_coefficient: float
    total_without_bias: float

    def to_dict(self) -> dict:
        return asdict(self)


def bound_terms(
    constants: Theorem2Constants,
    initial_gap: float,
    initial_grad_sq: float,
    T: int,
    sgd_variance_over_B: float = 0.0,
) -> BoundTerms:
    """
    The three right-hand-side terms for given F(x0) - F*, ||grad F(x0)||^2 and T.

    Informational only; the bias term still multiplies the unknown G_T.
    """
    if not constants.valid:
        return BoundTerms(math.nan, math.nan, constants.bias_coefficient, math.nan)
    optimization = 2 * (initial_gap + constants.beta * initial_grad_sq) / (constants.C1 * constants.eta * T)
    noise = constants.noise_coefficient * (constants.dp_term_multiplier + sgd_variance_over_B)
    return BoundTerms(optimization, noise, constants.bias_coefficient, optimization + noise)


# ============================================================================
# Monte Carlo
# ============================================================================

def _shaped_samples(mask: SpectralMask, sigma_w: float, n_samples: int, rng: CounterStream):
    """Yield chunks of shaped Gaussian noise G_Phi(w), w ~ N(0, sigma_w^2 I)."""
    remaining = n_samples
    while remaining > 0:
        size = min(SAMPLE_CHUNK, remaining)
        yield apply_filter(rng.normal((size, mask.d), scale=sigma_w), mask)
        remaining -= size


def operator_norm_minus_identity(
    mask: SpectralMask,
    rng: CounterStream,
    iterations: int = POWER_ITERATIONS,
    tol: float = POWER_TOLERANCE,
) -> float:
    """||A - I||_2 by power iteration on v -> G_Phi(v) - v (A is never formed)."""
    v = rng.normal(mask.d)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iterations):
        w = apply_filter(v, mask) - v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(norm - estimate) <= tol * max(norm, 1.0):
            return norm
        estimate = norm
    return estimate


@dataclass(frozen=True)
class Lemma1Report:
    d: int
    lam: float
    rho: float
    sigma_w: float
    rho_star_analytic: float
    trace_mc: float
    trace_analytic: float
    bias_norm_mc: float
    mean_norm: float
    n_samples: int

    @property
    def trace_rel_error(self) -> float:
        return abs(self.trace_mc - self.trace_analytic) / self.trace_analytic

    @property
    def mean_bound(self) -> float:
        """4 sigma_w sqrt(d / n)"""
        return 4 * self.sigma_w * math.sqrt(self.d / self.n_samples)

    def to_dict(self) -> dict:
        return {**asdict(self), "trace_rel_error": self.trace_rel_error, "mean_bound": self.mean_bound}


def verify_lemma1(
    d: int,
    lam: float,
    rho: float,
    sigma_w: float,
    n_samples: int,
    rng: CounterStream,
    alpha: float = 0.0,
) -> Lemma1Report:
    """
    Sample n shaped noise vectors; estimate tr Cov as the mean squared norm
    and ||A - I||_2 by power iteration. rho = 0 uses the identity mask.
    """
    mask = identity_mask(d) if rho == 0 else build_mask(d, lam, rho, alpha)
    total_sq = 0.0
    total = np.zeros(d)
    for chunk in _shaped_samples(mask, sigma_w, n_samples, rng):
        total_sq += float(np.sum(chunk * chunk))
        total += chunk.sum(axis=0)

    # for step masks mean phi^2 equals rho*
    fraction = float(np.mean(np.square(mask.phi)))
    report = Lemma1Report(
        d=d,
        lam=lam,
        rho=rho,
        sigma_w=sigma_w,
        rho_star_analytic=fraction,
        trace_mc=total_sq / n_samples,
        trace_analytic=fraction * d * sigma_w**2,
        bias_norm_mc=operator_norm_minus_identity(mask, rng),
        mean_norm=float(np.linalg.norm(total / n_samples)),
        n_samples=n_samples,
    )
    logger.debug("verify_lemma1 d=%d: trace %.5g vs %.5g", d, report.trace_mc, report.trace_analytic)
    return report


@dataclass(frozen=True)
class SpectralCovarianceReport:
    empirical: np.ndarray = field(repr=False)
    analytic: np.ndarray = field(repr=False)
    n_samples: int = 0

    @property
    def max_rel_error(self) -> float:
        return float(np.max(np.abs(self.empirical - self.analytic) / self.analytic))


def verify_spectral_covariance(
    mask: SpectralMask,
    sigma_w: float,
    n_samples: int,
    rng: CounterStream,
) -> SpectralCovarianceReport:
    """Empirical E|F(G_Phi(w))_k|^2 against sigma_w^2 d phi_k^2, bin by bin."""
    accum = np.zeros(mask.d)
    for chunk in _shaped_samples(mask, sigma_w, n_samples, rng):
        accum += np.sum(np.abs(dft_forward(chunk)) ** 2, axis=0)
    return SpectralCovarianceReport(
        empirical=accum / n_samples,
        analytic=sigma_w**2 * mask.d * np.square(mask.phi),
        n_samples=n_samples,
    )


@dataclass(frozen=True)
class ConvergenceStudy:
    sample_sizes: tuple[int, ...]
    rms_deviation: tuple[float, ...]
    fitted_exponent: float

    def to_dict(self) -> dict:
        return asdict(self)


def trace_convergence_study(
    d: int,
    lam: float,
    rho: float,
    sigma_w: float,
    rng: CounterStream,
    sample_sizes: Sequence[int] = (10_000, 40_000, 160_000),
    repeats: int = 16,
) -> ConvergenceStudy:
    """
    RMS relative deviation of the trace estimate over `repeats` independent
    estimates at each n, and the log-log slope (about -1/2).
    """
    mask = build_mask(d, lam, rho)
    analytic = float(np.mean(np.square(mask.phi))) * d * sigma_w**2
    rms = []
    for n in sample_sizes:
        errors = []
        for _ in range(repeats):
            total_sq = sum(float(np.sum(c * c)) for c in _shaped_samples(mask, sigma_w, n, rng))
            errors.append((total_sq / n - analytic) / analytic)
        rms.append(float(np.sqrt(np.mean(np.square(errors)))))
    slope = float(np.polyfit(np.log(sample_sizes), np.log(rms), 1)[0])
    return ConvergenceStudy(tuple(int(n) for n in sample_sizes), tuple(rms), slope)
