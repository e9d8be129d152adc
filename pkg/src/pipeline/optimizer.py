#!/usr/bin/env python3
"""
Optimizer - DP-SGD, DiSK and FFTKF training loops

Per step, with a Poisson batch B_t at rate q = B/N:

    dpsgd:  g_t = privatize(batch)                       x' = Opt(x, g_t)
    disk:   g_t = privatize(batch)
            g_pred = predict(grads at x and x + gamma d_prev)
            g~ = (1 - kappa) g_pred + kappa g_t            x' = Opt(x, g~)
    fftkf:  as disk, with g_t replaced by shape_noise(g_t, Phi)

disk is fftkf with the identity mask, and kappa = 1 turns either into dpsgd.
disk and fftkf are charged two releases per step (gradient and finite
difference) unless releases_per_step = 1 is asked for. Fixed-size batches
are accounted at q = 1.

Usage:
    from src.pipeline.optimizer import MethodConfig, BaseOptimizer, run

    cfg = MethodConfig(method="fftkf", privacy=params, base=BaseOptimizer("sgd", 0.5),
                       steps=500, batch_size=50, kalman=KalmanParams(), filter=FilterParams())
    result = run(cfg, problem)
    print(result.final_loss, result.epsilon)
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np

from src.tools import kalman
from src.tools.accountant import (
    DEFAULT_ORDERS,
    AccountantState,
    account_step,
    calibrate_sigma,
    epsilon_at_delta,
    new_accountant,
)
from src.tools.privacy import (
    PrivacyParams,
    finite_difference_sensitivity,
    gradient_sensitivity,
    noise_multiplier_for_std,
    noise_std_for_multiplier,
    poisson_batch,
    privatize_gradient,
    shape_noise,
)
from src.tools.problems import Problem
from src.tools.rng import CounterStream, ExperimentStreams
from src.tools.spectral import ParamVector, SpectralMask, build_mask, identity_mask, next_power_of_two
from src.utils.metrics import MetricsLog

logger = logging.getLogger(__name__)

Method = Literal["dpsgd", "disk", "fftkf"]
METHODS: tuple[str, ...] = ("dpsgd", "disk", "fftkf")


def default_releases(method: str) -> int:
    return 1 if method == "dpsgd" else 2


class MethodConfigError(ValueError):
    """Inconsistent method configuration."""


# ============================================================================
# Base optimizers
# ============================================================================

@dataclass
class BaseOptimizer:
    """
    x_{t+1} = Opt(x_t, eta, g~_t)

    sgd:       x - eta g
    momentum:  m = beta m + g;  x - eta m
    adam:      bias-corrected first/second moments, x - eta m^ / (sqrt(v^) + eps)
    """
    kind: Literal["sgd", "momentum", "adam"] = "sgd"
    learning_rate: float = 0.1
    momentum_beta: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "momentum", "adam"):
            raise MethodConfigError(f"Unknown base optimizer: {self.kind}")
        if not self.learning_rate > 0:
            raise MethodConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum_beta < 1:
            raise MethodConfigError(f"momentum_beta must lie in [0, 1), got {self.momentum_beta}")
        if not all(0 <= b < 1 for b in self.adam_betas):
            raise MethodConfigError(f"adam_betas must lie in [0, 1), got {self.adam_betas}")
        if not self.adam_epsilon > 0:
            raise MethodConfigError(f"adam_epsilon must be > 0, got {self.adam_epsilon}")

    def fresh(self) -> "BaseOptimizer":
        """Same hyperparameters, zeroed moments."""
        return replace(self, m=None, v=None, t=0)

    def update(self, x: ParamVector, g: ParamVector) -> ParamVector:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1

        if self.kind == "sgd":
            return x - self.learning_rate * g
        if self.kind == "momentum":
            self.m = self.momentum_beta * self.m + g
            return x - self.learning_rate * self.m

        b1, b2 = self.adam_betas
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        return x - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.adam_epsilon)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "momentum_beta": self.momentum_beta,
            "adam_betas": list(self.adam_betas),
            "adam_epsilon": self.adam_epsilon,
        }


# ============================================================================
# Method configuration
# ============================================================================

@dataclass(frozen=True)
class FilterParams:
    """Mask parameters; rho = 0 is the identity mask."""
    lam: float = 0.5
    rho: float = 0.5
    alpha: float = 0.0

    def build(self, d: int) -> SpectralMask:
        size = next_power_of_two(d)
        if self.rho == 0.0:
            return identity_mask(size)
        return build_mask(size, self.lam, self.rho, self.alpha)


@dataclass(frozen=True)
class KalmanParams:
    kappa: float = 0.5
    gamma: float = 1.0

    def __post_init__(self):
        if not 0 < self.kappa <= 1:
            raise MethodConfigError(f"kappa must lie in (0, 1], got {self.kappa}")
        if not self.gamma > 0:
            raise MethodConfigError(f"gamma must be > 0, got {self.gamma}")


@dataclass(frozen=True)
class MethodConfig:
    """One arm: method, privacy, base optimizer and loop settings."""
    method: Method
    privacy: PrivacyParams
    base: BaseOptimizer
    steps: int
    batch_size: int
    seed: int = 0
    filter: Optional[FilterParams] = None
    kalman: Optional[KalmanParams] = None
    releases_per_step: Optional[int] = None
    eval_interval: int = 10
    sampling: Literal["poisson", "fixed"] = "poisson"
    record_wall_time: bool = False
    name: Optional[str] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise MethodConfigError(f"Unknown method: {self.method}. Available: {list(METHODS)}")
        if self.method == "fftkf" and (self.filter is None or self.kalman is None):
            raise MethodConfigError("fftkf needs both filter and kalman parameters")
        if self.method == "disk" and self.kalman is None:
            raise MethodConfigError("disk needs kalman parameters")
        if self.method == "disk" and self.filter is not None:
            raise MethodConfigError("disk takes no filter parameters")
        if self.method == "dpsgd" and (self.filter is not None or self.kalman is not None):
            raise MethodConfigError("dpsgd takes no filter or kalman parameters")
        if self.steps < 0:
            raise MethodConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise MethodConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.releases_per_step is None:
            object.__setattr__(self, "releases_per_step", default_releases(self.method))
        if self.releases_per_step not in (1, 2):
            raise MethodConfigError(f"releases_per_step must be 1 or 2, got {self.releases_per_step}")
        if self.method == "dpsgd" and self.releases_per_step != 1:
            raise MethodConfigError("dpsgd makes one release per step")
        if self.eval_interval < 1:
            raise MethodConfigError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.sampling not in ("poisson", "fixed"):
            raise MethodConfigError(f"Unknown sampling: {self.sampling}")

    @property
    def label(self) -> str:
        return self.name or self.method

    @property
    def accounting_rate(self) -> float:
        """Sampling rate charged to the accountant; fixed-size batches get no amplification."""
        return 1.0 if self.sampling == "fixed" else self.privacy.sampling_rate_q

    def with_seed(self, seed: int) -> "MethodConfig":
        return replace(self, seed=seed)

    def noise_multiplier(self) -> float:
        """Multiplier charged to the accountant per release."""
        B = self.batch_size
        z_w = noise_multiplier_for_std(self.privacy.sigma_w, gradient_sensitivity(self.privacy.clip_C, B))
        if self.releases_per_step == 1 or self.kalman is None:
            return z_w
        z_fd = noise_multiplier_for_std(
            self.privacy.sigma_fd,
            finite_difference_sensitivity(self.privacy.clip_C, B, self.kalman.gamma),
        )
        return min(z_w, z_fd)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "name": self.label,
            "privacy": self.privacy.to_dict(),
            "base": self.base.to_dict(),
            "steps": self.steps,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "filter": None if self.filter is None else vars(self.filter),
            "kalman": None if self.kalman is None else vars(self.kalman),
            "releases_per_step": self.releases_per_step,
        }


def resolve_privacy(
    clip_C: float,
    batch_size: int,
    n_examples: int,
    steps: int,
    target_epsilon: float,
    target_delta: float,
    sigma_w: Optional[float] = None,
    sigma_fd: Optional[float] = None,
    gamma: float = 1.0,
    releases_per_step: int = 1,
    sampling: str = "poisson",
) -> PrivacyParams:
    """
    PrivacyParams with concrete noise scales.

    Without sigma_w the multiplier z is calibrated to the target budget and
    sigma_w = z C / B. sigma_fd defaults to the same multiplier on the
    finite-difference sensitivity 2C / (B gamma).
    Fixed-size sampling is calibrated at q = 1.

    Raises:
        InfeasiblePrivacyTarget: no multiplier reaches the target
    """
    q = min(1.0, batch_size / n_examples)
    if sigma_w is None:
        if math.isinf(clip_C):
            raise MethodConfigError("An unbounded clip needs an explicit sigma_w")
        q_charged = 1.0 if sampling == "fixed" else q
        z = calibrate_sigma(target_epsilon, target_delta, q_charged, steps, releases_per_step, DEFAULT_ORDERS)
        sigma_w = noise_std_for_multiplier(z, gradient_sensitivity(clip_C, batch_size))
        logger.info("Calibrated z=%.5g (sigma_w=%.5g) for eps=%s over %d steps", z, sigma_w, target_epsilon, steps)
    else:
        z = noise_multiplier_for_std(sigma_w, gradient_sensitivity(clip_C, batch_size))
    if sigma_fd is None:
        sigma_fd = noise_std_for_multiplier(z, finite_difference_sensitivity(clip_C, batch_size, gamma))
    return PrivacyParams(
        clip_C=clip_C,
        sigma_w=float(sigma_w),
        sigma_fd=float(sigma_fd),
        sampling_rate_q=q,
        target_epsilon=target_epsilon,
        target_delta=target_delta,
    )


# ============================================================================
# Steps
# ============================================================================

@dataclass
class StepContext:
    """Per-run objects the step functions share and advance."""
    config: MethodConfig
    optimizer: BaseOptimizer
    accountant: AccountantState
    mask: Optional[SpectralMask] = None
    noise_multiplier: float = 0.0


@dataclass
class StepResult:
    x: ParamVector
    estimate: ParamVector
    kalman_state: Optional[kalman.KalmanState] = None


def draw_batch(rng: CounterStream, n: int, config: MethodConfig) -> np.ndarray:
    """Poisson batch at q = B/N, or B indices without replacement."""
    if config.sampling == "fixed":
        return np.sort(rng.permutation(n)[: config.batch_size])
    return poisson_batch(rng, n, config.privacy.sampling_rate_q)


def _charge(ctx: StepContext) -> None:
    ctx.accountant = account_step(ctx.accountant, ctx.config.accounting_rate, ctx.noise_multiplier)


def step_dpsgd(
    x: ParamVector,
    problem: Problem,
    batch: np.ndarray,
    ctx: StepContext,
    streams: ExperimentStreams,
) -> StepResult:
    p = ctx.config.privacy
    grads = problem.per_sample_gradients(x, batch)
    g = privatize_gradient(grads, p.clip_C, p.sigma_w, streams.noise_w, batch_size=ctx.config.batch_size)
    _charge(ctx)
    return StepResult(x=ctx.optimizer.update(x, g), estimate=g)


def step_fftkf(
    x: ParamVector,
    state: kalman.KalmanState,
    problem: Problem,
    batch: np.ndarray,
    ctx: StepContext,
    streams: ExperimentStreams,
) -> StepResult:
    """privatize -> shape_noise -> predict -> correct -> Opt -> advance"""
    p = ctx.config.privacy
    B = ctx.config.batch_size
    grads_x = problem.per_sample_gradients(x, batch)
    g = privatize_gradient(grads_x, p.clip_C, p.sigma_w, streams.noise_w, batch_size=B)
    g_hat = shape_noise(g, ctx.mask)

    grads_shifted = problem.per_sample_gradients(x + state.gamma * state.d_prev, batch)
    prediction = kalman.predict(state, grads_x, grads_shifted, p.clip_C, p.sigma_fd, streams.noise_fd, batch_size=B)
    g_tilde = kalman.correct(state, prediction, g_hat)
    _charge(ctx)

    x_next = ctx.optimizer.update(x, g_tilde)
    return StepResult(x=x_next, estimate=g_tilde, kalman_state=kalman.advance(state, g_tilde, x_next - x))


def step_disk(
    x: ParamVector,
    state: kalman.KalmanState,
    problem: Problem,
    batch: np.ndarray,
    ctx: StepContext,
    streams: ExperimentStreams,
) -> StepResult:
    """step_fftkf without spectral shaping."""
    if ctx.mask is None or not ctx.mask.is_identity:
        ctx.mask = identity_mask(next_power_of_two(problem.d))
    return step_fftkf(x, state, problem, batch, ctx, streams)


# ============================================================================
# Training loop
# ============================================================================

@dataclass
class TrainingResult:
    config: MethodConfig
    log: MetricsLog
    x_final: ParamVector = field(repr=False)
    epsilon: float
    noise_multiplier: float
    accountant: AccountantState = field(repr=False)
    gradient_evaluations: int = 0

    @property
    def final_loss(self) -> float:
        return self.log.final()["train_loss"]

    def to_dict(self) -> dict:
        return {
            "arm": self.config.label,
            "seed": self.config.seed,
            "steps": self.config.steps,
            "epsilon": self.epsilon,
            "noise_multiplier": self.noise_multiplier,
            "gradient_evaluations": self.gradient_evaluations,
            **{f"final_{k}": v for k, v in self.log.final().items()},
        }


def run(config: MethodConfig, problem: Problem) -> TrainingResult:
    """
    Train for config.steps steps and log every step.

    Deterministic given config.seed: every random draw comes from the
    seed's named streams.
    """
    streams = ExperimentStreams(config.seed)
    releases = config.releases_per_step if config.method != "dpsgd" else 1
    ctx = StepContext(
        config=config,
        optimizer=config.base.fresh(),
        accountant=new_accountant(releases_per_step=releases),
        noise_multiplier=config.noise_multiplier(),
    )
    if config.method == "fftkf":
        ctx.mask = config.filter.build(problem.d)
    elif config.method == "disk":
        ctx.mask = identity_mask(next_power_of_two(problem.d))

    x = problem.initial_point(streams.init)
    state = None
    if config.kalman is not None:
        state = kalman.initial_state(problem.d, config.kalman.kappa, config.kalman.gamma)

    log = MetricsLog(arm=config.label, seed=config.seed)
    evals_before = problem.gradient_evaluations
    delta = config.privacy.target_delta
    diverged = False
    logger.debug("Starting %s seed=%d for %d steps", config.label, config.seed, config.steps)
    if config.sampling == "fixed" and config.privacy.sampling_rate_q < 1:
        logger.warning("%s: fixed-size batches carry no amplification guarantee, accounting at q=1", config.label)

    for t in range(1, config.steps + 1):
        start = time.perf_counter()
        batch = draw_batch(streams.subsample, problem.n, config)
        if config.method == "dpsgd":
            result = step_dpsgd(x, problem, batch, ctx, streams)
        else:
            result = step_fftkf(x, state, problem, batch, ctx, streams)
            state = result.kalman_state
        wall_ms = (time.perf_counter() - start) * 1000.0

        grad_error = None
        if problem.has_exact_gradient:
            grad_error = float(np.linalg.norm(result.estimate - problem.full_gradient(x)))
        x = result.x

        train_loss = problem.loss(x)
        if not math.isfinite(train_loss) and not diverged:
            diverged = True
            logger.warning("%s seed=%d: training loss is %s at step %d", config.label, config.seed, train_loss, t)
        test_acc = problem.test_accuracy(x) if (t % config.eval_interval == 0 or t == config.steps) else None

        log.append(
            step=t,
            train_loss=train_loss,
            grad_error=grad_error,
            test_acc=test_acc,
            epsilon_spent=epsilon_at_delta(ctx.accountant, delta),
            wall_ms=wall_ms if config.record_wall_time else None,
        )

    epsilon = epsilon_at_delta(ctx.accountant, delta)
    logger.debug("Finished %s seed=%d: eps=%.4g", config.label, config.seed, epsilon)
    return TrainingResult(
        config=config,
        log=log,
        x_final=x,
        epsilon=epsilon,
        noise_multiplier=ctx.noise_multiplier,
        accountant=ctx.accountant,
        gradient_evaluations=problem.gradient_evaluations - evals_before,
    )
