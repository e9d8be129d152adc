#!/usr/bin/env python3
"""
Privacy Accountant - Renyi DP of the subsampled Gaussian mechanism

Each step adds, at every order a, the RDP cost of `releases_per_step`
subsampled Gaussian releases with noise multiplier z = sigma / sensitivity:

    q = 1:      a / (2 z^2)
    0 < q < 1:  log(A_a) / (a - 1),   A_a = E_{x~N(0,z^2)}[((1-q) + q e^{(2x-1)/(2z^2)})^a]

Conversion to (eps, delta):

    eps = min_a  rdp(a) + log(1/delta) / (a - 1)

Usage:
    from src.tools.accountant import new_accountant, account_step, epsilon_at_delta

    state = new_accountant(releases_per_step=2)
    for _ in range(T):
        state = account_step(state, q=0.01, sigma_over_C=1.1)
    eps = epsilon_at_delta(state, 1e-5)
"""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import integrate, special

from .privacy import PrivacyValidationError

logger = logging.getLogger(__name__)

DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5, 1.75) + tuple(float(a) for a in range(2, 65))

# Search bounds for noise-multiplier calibration
MIN_MULTIPLIER = 1e-3
MAX_MULTIPLIER = 1e4


class InfeasiblePrivacyTarget(ValueError):
    """No noise multiplier within the search bounds reaches the target epsilon."""


@dataclass(frozen=True)
class AccountantState:
    """Value-semantics accountant; account_step returns a new state."""
    steps_taken: int = 0
    releases_per_step: int = 1
    rdp_orders: tuple[float, ...] = DEFAULT_ORDERS
    accumulated_rdp: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.releases_per_step < 1:
            raise PrivacyValidationError(f"releases_per_step must be >= 1, got {self.releases_per_step}")
        if any(a <= 1 for a in self.rdp_orders):
            raise PrivacyValidationError("RDP orders must be > 1")
        if not self.accumulated_rdp:
            object.__setattr__(self, "accumulated_rdp", (0.0,) * len(self.rdp_orders))
        elif len(self.accumulated_rdp) != len(self.rdp_orders):
            raise PrivacyValidationError("accumulated_rdp and rdp_orders differ in length")

    def to_dict(self) -> dict:
        return {
            "steps_taken": self.steps_taken,
            "releases_per_step": self.releases_per_step,
            "rdp_orders": list(self.rdp_orders),
            "accumulated_rdp": list(self.accumulated_rdp),
        }


def new_accountant(releases_per_step: int = 1, orders: Sequence[float] = DEFAULT_ORDERS) -> AccountantState:
    return AccountantState(releases_per_step=releases_per_step, rdp_orders=tuple(float(a) for a in orders))


# ============================================================================
# Log-space arithmetic
# ============================================================================

def _log_add(logx: float, logy: float) -> float:
    a, b = min(logx, logy), max(logx, logy)
    if a == -np.inf:
        return b
    return math.log1p(math.exp(a - b)) + b


def _log_sub(logx: float, logy: float) -> float:
    if logx < logy:
        raise ValueError("The result of subtraction must be non-negative.")
    if logy == -np.inf:
        return logx
    if logx == logy:
        return -np.inf
    try:
        return math.log(math.expm1(logx - logy)) + logy
    except OverflowError:
        return logx


def _log_comb(n: float, k: float) -> float:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def _log_erfc(x: float) -> float:
    return math.log(2) + special.log_ndtr(-x * 2**0.5)


def _compute_log_a_int(q: float, sigma: float, alpha: int) -> float:
    log_a = -np.inf
    for i in range(alpha + 1):
        log_coef_i = _log_comb(alpha, i) + i * math.log(q) + (alpha - i) * math.log(1 - q)
        log_a = _log_add(log_a, log_coef_i + (i * i - i) / (2 * sigma**2))
    return float(log_a)


def _compute_log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # Integrals over (-inf, z0] and [z0, +inf), accumulated in log space
    log_a0, log_a1 = -np.inf, -np.inf
    z0 = sigma**2 * math.log(1 / q - 1) + 0.5
    i = 0
    while True:
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i

        log_t0 = log_coef + i * math.log(q) + j * math.log(1 - q)
        log_t1 = log_coef + j * math.log(q) + i * math.log(1 - q)

        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma))

        log_s0 = log_t0 + (i * i - i) / (2 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * sigma**2) + log_e1

        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)

        i += 1
        if max(log_s0, log_s1) < -30:
            break
    return _log_add(log_a0, log_a1)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """RDP at order alpha of one subsampled Gaussian release (multiplier sigma)."""
    if q == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    if q == 1.0:
        return alpha / (2 * sigma**2)
    if float(alpha).is_integer():
        log_a = _compute_log_a_int(q, sigma, int(alpha))
    else:
        log_a = _compute_log_a_frac(q, sigma, alpha)
    return log_a / (alpha - 1)


def compute_rdp(q: float, sigma: float, steps: int, orders: Sequence[float] = DEFAULT_ORDERS) -> np.ndarray:
    """RDP of `steps` compositions at each order."""
    if steps == 0:
        return np.zeros(len(orders))
    return np.array(_rdp_per_release(float(q), float(sigma), tuple(float(a) for a in orders))) * steps


@lru_cache(maxsize=1024)
def _rdp_per_release(q: float, sigma: float, orders: tuple[float, ...]) -> tuple[float, ...]:
    return tuple(rdp_subsampled_gaussian(q, sigma, a) for a in orders)


def numerical_rdp_oracle(q: float, sigma: float, alpha: float) -> float:
    """
    Brute-force RDP by numerical integration of A_alpha (test oracle).

    The integrand mu0(x) * ((1-q) + q exp((2x-1)/(2 sigma^2)))^alpha has its
    mass between the two Gaussian centres 0 and alpha; it is integrated with
    scipy.integrate.quad after shifting by its log-maximum to avoid overflow.
    """
    if q == 0:
        return 0.0
    log_keep = math.log1p(-q) if q < 1 else -np.inf

    def log_integrand(x: float) -> float:
        log_mu0 = -x * x / (2 * sigma**2) - math.log(sigma * math.sqrt(2 * math.pi))
        log_ratio = _log_add(log_keep, math.log(q) + (2 * x - 1) / (2 * sigma**2))
        return log_mu0 + alpha * log_ratio

    lo, hi = -40.0 * sigma, alpha + 40.0 * sigma
    grid = np.linspace(lo, hi, 4001)
    logs = np.array([log_integrand(float(x)) for x in grid])
    shift = float(logs.max())
    mode = float(grid[int(np.argmax(logs))])

    value, _ = integrate.quad(
        lambda x: math.exp(log_integrand(x) - shift), lo, hi, points=[mode], limit=500, epsrel=1e-10
    )
    return (math.log(value) + shift) / (alpha - 1)


# ============================================================================
# Accountant operations
# ============================================================================

def account_step(state: AccountantState, q: float, sigma_over_C: float) -> AccountantState:
    """
    Add one step (releases_per_step subsampled Gaussian releases).

    sigma_over_C is the noise multiplier (noise std / l2 sensitivity). Zero
    noise with q > 0 makes every order infinite.
    """
    if sigma_over_C < 0:
        raise PrivacyValidationError(f"Noise multiplier must be >= 0, got {sigma_over_C}")
    if not 0 <= q <= 1:
        raise PrivacyValidationError(f"Sampling rate must lie in [0, 1], got {q}")
    increment = compute_rdp(q, sigma_over_C, state.releases_per_step, state.rdp_orders)
    accumulated = np.asarray(state.accumulated_rdp) + increment
    return replace(
        state,
        steps_taken=state.steps_taken + 1,
        accumulated_rdp=tuple(float(r) for r in accumulated),
    )


def privacy_spent(state: AccountantState, delta: float) -> tuple[float, float]:
    """(epsilon, optimal order) at the given delta."""
    if not 0 < delta < 1:
        raise PrivacyValidationError(f"delta must lie in (0, 1), got {delta}")
    rdp = np.asarray(state.accumulated_rdp)
    orders = np.asarray(state.rdp_orders)
    if not np.any(rdp > 0):
        return 0.0, float(orders[0])
    eps = rdp + math.log(1 / delta) / (orders - 1)
    idx = int(np.argmin(eps))
    return max(0.0, float(eps[idx])), float(orders[idx])


def epsilon_at_delta(state: AccountantState, delta: float) -> float:
    """min_a rdp(a) + log(1/delta)/(a - 1); 0 for an empty composition."""
    return privacy_spent(state, delta)[0]


def epsilon_for(
    q: float,
    sigma_over_C: float,
    steps: int,
    delta: float,
    releases_per_step: int = 1,
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> float:
    """Epsilon after `steps` identical steps, computed in closed form."""
    rdp = compute_rdp(q, sigma_over_C, steps * releases_per_step, orders)
    state = AccountantState(
        steps_taken=steps,
        releases_per_step=releases_per_step,
        rdp_orders=tuple(orders),
        accumulated_rdp=tuple(float(r) for r in rdp),
    )
    return epsilon_at_delta(state, delta)


def calibrate_sigma(
    target_epsilon: float,
    target_delta: float,
    q: float,
    T: int,
    releases_per_step: int = 1,
    orders: Sequence[float] = DEFAULT_ORDERS,
    rel_tol: float = 1e-7,
) -> float:
    """
    Smallest noise multiplier whose epsilon after T steps stays within target.

    Bisection on a bracket grown by doubling; the result aims slightly below
    the target so re-accounting step by step cannot overshoot it.

    Raises:
        InfeasiblePrivacyTarget: even MAX_MULTIPLIER exceeds the target
    """
    if not target_epsilon > 0:
        raise PrivacyValidationError(f"target_epsilon must be > 0, got {target_epsilon}")
    if T == 0:
        return 0.0

    goal = target_epsilon * (1 - 1e-6)

    def eps(z: float) -> float:
        return epsilon_for(q, z, T, target_delta, releases_per_step, orders)

    hi = 1.0
    while eps(hi) > goal:
        hi *= 2
        if hi > MAX_MULTIPLIER:
            raise InfeasiblePrivacyTarget(
                f"Target eps={target_epsilon} at delta={target_delta} unreachable for "
                f"q={q}, T={T}, releases_per_step={releases_per_step} "
                f"(eps={eps(MAX_MULTIPLIER):.4g} at multiplier {MAX_MULTIPLIER:g})"
            )
    lo = MIN_MULTIPLIER if eps(MIN_MULTIPLIER) > goal else 0.0
    if lo == 0.0:
        return MIN_MULTIPLIER
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if eps(mid) > goal:
            lo = mid
        else:
            hi = mid

    logger.debug("Calibrated noise multiplier %.6g for eps=%s (q=%s, T=%s)", hi, target_epsilon, q, T)
    return hi
