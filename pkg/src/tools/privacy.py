#!/usr/bin/env python3
"""
Privacy Tools - clipping, Gaussian mechanism and spectral noise shaping

Pipeline per step (shaping always comes after privatization):

    per-sample grads -> clip(., C) -> mean + w_t -> shape_noise(., Phi)

The shaping map is data independent, so it cannot change the (eps, delta)
guarantee of the privatized gradient; the accountant never sees the mask.

Usage:
    from src.tools.privacy import privatize_gradient, shape_noise

    g = privatize_gradient(grads, C=1.0, sigma_w=0.05, rng=streams.noise_w)
    g_hat = shape_noise(g, mask)
"""

import math
from dataclasses import dataclass, asdict
from typing import Optional, Sequence, Union

import numpy as np
import numpy.typing as npt

from .rng import CounterStream
from .spectral import ParamVector, SpectralMask, apply_filter

GradientBatch = Union[npt.NDArray[np.float64], Sequence[ParamVector]]


class PrivacyValidationError(ValueError):
    """Invalid privacy parameters or batch."""


@dataclass(frozen=True)
class PrivacyParams:
    """Clip bound, noise scales and the target budget of one method."""
    clip_C: float
    sigma_w: float
    sigma_fd: float
    sampling_rate_q: float
    target_epsilon: float
    target_delta: float

    def __post_init__(self):
        if not self.clip_C > 0:
            raise PrivacyValidationError(f"clip_C must be > 0, got {self.clip_C}")
        if self.sigma_w < 0 or self.sigma_fd < 0:
            raise PrivacyValidationError("Noise scales must be >= 0")
        if not 0 < self.sampling_rate_q <= 1:
            raise PrivacyValidationError(f"Sampling rate must lie in (0, 1], got {self.sampling_rate_q}")
        if not self.target_epsilon > 0:
            raise PrivacyValidationError(f"target_epsilon must be > 0, got {self.target_epsilon}")
        if not 0 < self.target_delta < 1:
            raise PrivacyValidationError(f"target_delta must lie in (0, 1), got {self.target_delta}")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_batch(per_sample_grads: GradientBatch) -> np.ndarray:
    if isinstance(per_sample_grads, np.ndarray):
        grads = np.asarray(per_sample_grads, dtype=np.float64)
    elif len(per_sample_grads) == 0:
        raise PrivacyValidationError("Empty batch")
    else:
        lengths = {np.shape(g) for g in per_sample_grads}
        if len(lengths) != 1:
            raise PrivacyValidationError(f"Per-sample gradients differ in shape: {sorted(lengths)}")
        grads = np.stack([np.asarray(g, dtype=np.float64) for g in per_sample_grads])
    if grads.ndim != 2:
        raise PrivacyValidationError(f"Expected a (B, d) batch, got shape {grads.shape}")
    return grads


def clip_rows(grads: np.ndarray, C: float) -> np.ndarray:
    """Clip every row to l2 norm at most C. Rows already inside the ball are returned as-is."""
    norms = np.linalg.norm(grads, axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        scale = np.minimum(1.0, C / norms)
    # zero rows: C / 0 = inf, min(1, inf) = 1
    return grads * scale


def clip(v: npt.ArrayLike, C: float) -> ParamVector:
    """clip(v, C) = v * min(1, C / ||v||_2)"""
    if not C > 0:
        raise PrivacyValidationError(f"Clip bound must be > 0, got {C}")
    arr = np.asarray(v, dtype=np.float64)
    return clip_rows(arr[None, :], C)[0]


def privatize_gradient(
    per_sample_grads: GradientBatch,
    C: float,
    sigma_w: float,
    rng: CounterStream,
    batch_size: Optional[float] = None,
) -> ParamVector:
    """
    Gaussian mechanism on the clipped batch mean.

    Args:
        per_sample_grads: (B, d) array or list of B vectors
        C: Clip bound
        sigma_w: Per-coordinate noise std added to the mean
        rng: Noise stream (w_t)
        batch_size: Denominator of the mean. Poisson-sampled batches pass the
            expected batch size here; the realized batch may then be empty.

    Returns:
        (1/B) sum clip(g_i, C) + N(0, sigma_w^2 I)
    """
    grads = _as_batch(per_sample_grads)
    if batch_size is None:
        if grads.shape[0] == 0:
            raise PrivacyValidationError("Empty batch")
        batch_size = grads.shape[0]
    if sigma_w < 0:
        raise PrivacyValidationError(f"sigma_w must be >= 0, got {sigma_w}")

    d = grads.shape[1]
    total = clip_rows(grads, C).sum(axis=0)
    noise = rng.normal(d, scale=sigma_w)
    return total / batch_size + noise


def shape_noise(w: npt.ArrayLike, m: SpectralMask) -> ParamVector:
    """w' = F^-1(Phi * F(w)); never increases the l2 norm."""
    return apply_filter(w, m)


# ============================================================================
# Sensitivity and noise scale conversions
# ============================================================================

def gradient_sensitivity(C: float, batch_size: float) -> float:
    """l2 sensitivity of the clipped mean: C / B."""
    return C / batch_size


def finite_difference_sensitivity(C: float, batch_size: float, gamma: float) -> float:
    """
    l2 sensitivity of the finite-difference term (sum_shifted - sum)/(B gamma).

    Both clipped gradients of the changed sample are bounded by C, so the
    difference moves by at most 2C / (B gamma).
    """
    return 2.0 * C / (batch_size * gamma)


def noise_std_for_multiplier(multiplier: float, sensitivity: float) -> float:
    if math.isinf(sensitivity):
        return math.inf if multiplier > 0 else 0.0
    return multiplier * sensitivity


def noise_multiplier_for_std(sigma: float, sensitivity: float) -> float:
    """sigma / sensitivity; 0 when sensitivity is unbounded."""
    if math.isinf(sensitivity):
        return 0.0
    return sigma / sensitivity


def poisson_batch(rng: CounterStream, n: int, q: float) -> np.ndarray:
    """Include each of the n examples independently with probability q."""
    if not 0 < q <= 1:
        raise PrivacyValidationError(f"Sampling rate must lie in (0, 1], got {q}")
    return np.flatnonzero(rng.bernoulli(n, q))
