"""
Scalar-gain Kalman filter over gradient estimates.

With P_t = p_t I and K_t = kappa I every filter operation is a vector blend:

    predict:  g_pred = g_tilde + (mean clip(grad f(x + gamma d)) - mean clip(grad f(x))) / gamma + w_fd
    correct:  g_tilde' = (1 - kappa) g_pred + kappa g_hat

The finite difference approximates H d_prev; on a quadratic it is exact.
kappa is a fixed hyperparameter (no Riccati update of p_t).
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import numpy.typing as npt

from .privacy import GradientBatch, _as_batch, clip_rows
from .rng import CounterStream
from .spectral import ParamVector


class KalmanValidationError(ValueError):
    """Inconsistent filter inputs."""


@dataclass(frozen=True)
class KalmanState:
    """
    Filter state carried between steps.

    kappa = 1 switches the filter off (the correction returns g_hat); it is
    accepted so DiSK can be reduced to DP-SGD.
    """
    g_tilde: np.ndarray = field(repr=False)
    d_prev: np.ndarray = field(repr=False)
    kappa: float
    gamma: float
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.kappa <= 1.0:
            raise KalmanValidationError(f"kappa must lie in (0, 1], got {self.kappa}")
        if not self.gamma > 0.0:
            raise KalmanValidationError(f"gamma must be > 0, got {self.gamma}")
        if self.g_tilde.shape != self.d_prev.shape:
            raise KalmanValidationError(
                f"g_tilde {self.g_tilde.shape} and d_prev {self.d_prev.shape} differ in shape"
            )

    @property
    def d(self) -> int:
        return int(self.g_tilde.shape[0])


def initial_state(d: int, kappa: float, gamma: float) -> KalmanState:
    """g_tilde = 0, d_prev = 0"""
    return KalmanState(g_tilde=np.zeros(d), d_prev=np.zeros(d), kappa=kappa, gamma=gamma)


def predict(
    state: KalmanState,
    grads_at_x: GradientBatch,
    grads_at_shifted: GradientBatch,
    C: float,
    sigma_fd: float,
    rng: CounterStream,
    batch_size: Optional[float] = None,
) -> ParamVector:
    """
    Privatized finite-difference prediction g_{t|t-1}.

    Args:
        state: Filter state (g_tilde, d_prev, gamma)
        grads_at_x: Per-sample gradients at x_t
        grads_at_shifted: Per-sample gradients of the same batch at x_t + gamma * d_prev
        C: Clip bound applied to every per-sample gradient
        sigma_fd: Std of the finite-difference noise w_fd
        rng: Noise stream (w_fd)
        batch_size: Denominator B of both sums (defaults to the realized batch size)

    Returns:
        g_tilde + (sum clip(shifted) - sum clip(unshifted)) / (B gamma) + w_fd
    """
    at_x = _as_batch(grads_at_x)
    at_shifted = _as_batch(grads_at_shifted)
    if at_x.shape != at_shifted.shape:
        raise KalmanValidationError(
            f"Batch mismatch: {at_x.shape} at x vs {at_shifted.shape} at the shifted point"
        )
    if at_x.shape[1] != state.d:
        raise KalmanValidationError(f"Gradient length {at_x.shape[1]} does not match state length {state.d}")
    if batch_size is None:
        if at_x.shape[0] == 0:
            raise KalmanValidationError("Empty batch")
        batch_size = at_x.shape[0]

    difference = clip_rows(at_shifted, C).sum(axis=0) - clip_rows(at_x, C).sum(axis=0)
    finite_difference = difference / (batch_size * state.gamma)
    noise = rng.normal(state.d, scale=sigma_fd)
    return state.g_tilde + finite_difference + noise


def correct(
    state: KalmanState,
    prediction: npt.ArrayLike,
    g_hat: npt.ArrayLike,
    kappa: Optional[float] = None,
) -> ParamVector:
    """(1 - kappa) * prediction + kappa * g_hat"""
    kappa = state.kappa if kappa is None else kappa
    if not 0.0 < kappa <= 1.0:
        raise KalmanValidationError(f"kappa must lie in (0, 1], got {kappa}")
    pred = np.asarray(prediction, dtype=np.float64)
    obs = np.asarray(g_hat, dtype=np.float64)
    if pred.shape != obs.shape:
        raise KalmanValidationError(f"Length mismatch: prediction {pred.shape} vs observation {obs.shape}")
    return (1.0 - kappa) * pred + kappa * obs


def advance(state: KalmanState, new_g_tilde: npt.ArrayLike, new_step_d: npt.ArrayLike) -> KalmanState:
    """Store the corrected estimate and the step d_t = x_{t+1} - x_t."""
    return replace(
        state,
        g_tilde=np.asarray(new_g_tilde, dtype=np.float64),
        d_prev=np.asarray(new_step_d, dtype=np.float64),
        initialized=True,
    )
