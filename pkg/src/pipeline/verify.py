"""
Verification suite behind `harness verify`.

Each check returns a CheckResult with expected / observed values and the
tolerance used. A check that raises is recorded as failed with the error.
"""

import logging
import math
from dataclasses import dataclass, asdict, replace
from typing import Callable, Optional

import numpy as np

from src.tools import kalman
from src.tools.accountant import new_accountant, numerical_rdp_oracle, rdp_subsampled_gaussian
from src.tools.privacy import PrivacyParams
from src.tools.problems import (
    LogisticProblem,
    MLPProblem,
    QuadraticProblem,
    gradient_check,
    make_classification,
)
from src.tools.rng import CounterStream, ExperimentStreams
from src.tools.spectral import (
    RESIDUE_TOLERANCE,
    SpectralMask,
    apply_filter,
    build_mask,
    count_transforms,
    dft_forward,
    dft_inverse,
    inverse_residue,
    naive_dft,
)

from .analysis import c1, c1_exact, noise_reduction_report, rho_star, verify_lemma1
from .optimizer import (
    BaseOptimizer,
    FilterParams,
    KalmanParams,
    MethodConfig,
    StepContext,
    draw_batch,
    run,
    step_fftkf,
)

logger = logging.getLogger(__name__)

FAULTS = ("asymmetric-mask",)

MASK_SETTINGS = (
    (0.5, 0.5, 0.0),
    (0.25, 0.9, 0.0),
    (0.75, 0.1, 0.0),
    (0.5, 0.5, 0.3),
    (0.1, 0.8, 1.0),
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    expected: str
    observed: str
    tolerance: str
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _inject(mask: SpectralMask, fault: Optional[str]) -> SpectralMask:
    if fault != "asymmetric-mask":
        return mask
    phi = np.array(mask.phi)
    # break phi_k = phi_{d-k} at one pair
    phi[1] = 1.0
    phi[-1] = 0.0
    return replace(mask, phi=phi)


def check_fft_oracle(fault: Optional[str] = None) -> CheckResult:
    rng = CounterStream(0, "analysis")
    worst = 0.0
    for exp in range(2, 9):
        d = 2**exp
        v = rng.normal((100, d))
        fast, slow = dft_forward(v), naive_dft(v)
        worst = max(worst, float(np.max(np.abs(fast - slow)) / np.max(np.abs(slow))))
    return CheckResult("fft_vs_naive_dft", worst <= 1e-9, "0", f"{worst:.3e}", "1e-9 rel")


def check_parseval_roundtrip(fault: Optional[str] = None) -> CheckResult:
    rng = CounterStream(1, "analysis")
    worst_p, worst_r = 0.0, 0.0
    for exp in range(2, 11):
        d = 2**exp
        v = rng.normal((50, d))
        s = dft_forward(v)
        energy = np.sum(v * v, axis=1)
        worst_p = max(worst_p, float(np.max(np.abs(np.sum(np.abs(s) ** 2, axis=1) / d - energy) / energy)))
        worst_r = max(worst_r, float(np.max(np.abs(dft_inverse(s) - v))))
    worst = max(worst_p, worst_r)
    return CheckResult(
        "parseval_and_roundtrip", worst <= 1e-10, "0", f"parseval {worst_p:.2e}, roundtrip {worst_r:.2e}", "1e-10"
    )


def check_non_expansion(fault: Optional[str] = None) -> CheckResult:
    rng = CounterStream(2, "analysis")
    d = 256
    worst = -math.inf
    residue = 0.0
    for lam, rho, alpha in MASK_SETTINGS:
        mask = _inject(build_mask(d, lam, rho, alpha), fault)
        w = rng.normal((10_000, d))
        residue = max(residue, inverse_residue(dft_forward(w[:16]) * mask.phi))
        shaped = apply_filter(w, mask)
        worst = max(worst, float(np.max(np.linalg.norm(shaped, axis=1) - np.linalg.norm(w, axis=1))))
    passed = worst <= 1e-9 and residue <= RESIDUE_TOLERANCE
    return CheckResult(
        "non_expansion_and_realness", passed, "||G(w)|| <= ||w||", f"max excess {worst:.2e}, residue {residue:.1e}", "1e-9"
    )


def check_lemma1_reference(fault: Optional[str] = None, n_samples: int = 100_000) -> CheckResult:
    analytic = rho_star(0.5, 0.5, 1024)
    report = verify_lemma1(1024, 0.5, 0.5, 1.0, n_samples, CounterStream(3, "analysis"))
    passed = analytic == 0.625 and report.trace_rel_error <= 0.02 and abs(report.bias_norm_mc - 0.5) <= 1e-6
    return CheckResult(
        "lemma1_reference_point",
        passed,
        "rho*=0.625, trace=640, ||A-I||=0.5",
        f"rho*={analytic}, trace={report.trace_mc:.2f}, ||A-I||={report.bias_norm_mc:.8f}",
        "2% / 1e-6",
    )


def check_noise_reduction(fault: Optional[str] = None) -> CheckResult:
    observed = noise_reduction_report(0.5, 0.5)
    return CheckResult("noise_reduction_figures", observed == (37.5, 25.0), "(37.5, 25.0)", str(observed), "exact")


def _chain_config(method: str, kappa: float = 0.5, rho: float = 0.0) -> MethodConfig:
    privacy = PrivacyParams(
        clip_C=1.0, sigma_w=0.05, sigma_fd=0.1, sampling_rate_q=0.2, target_epsilon=4.0, target_delta=1e-5
    )
    return MethodConfig(
        method=method,
        privacy=privacy,
        base=BaseOptimizer("sgd", 0.1),
        steps=100,
        batch_size=10,
        seed=7,
        filter=FilterParams(rho=rho) if method == "fftkf" else None,
        kalman=None if method == "dpsgd" else KalmanParams(kappa=kappa, gamma=1.0),
    )


def check_reduction_chain(fault: Optional[str] = None) -> CheckResult:
    problem = QuadraticProblem.create(d=64, n=50, tau=0.5, seed=1)
    fftkf_identity = run(_chain_config("fftkf", kappa=0.5, rho=0.0), problem).x_final
    disk = run(_chain_config("disk", kappa=0.5), problem).x_final
    disk_k1 = run(_chain_config("disk", kappa=1.0), problem).x_final
    dpsgd = run(_chain_config("dpsgd"), problem).x_final
    first = bool(np.array_equal(fftkf_identity, disk))
    second = bool(np.array_equal(disk_k1, dpsgd))
    return CheckResult(
        "reduction_chain",
        first and second,
        "bit-exact",
        f"fftkf(identity)==disk: {first}, disk(kappa=1)==dpsgd: {second}",
        "0",
    )


def check_gradients(fault: Optional[str] = None) -> CheckResult:
    rng = CounterStream(4, "analysis")
    data = make_classification(40, n_features=20, n_classes=10, seed=2)
    binary = make_classification(40, n_features=20, n_classes=2, seed=3)
    idx = np.arange(8)
    errors = {}
    logistic = LogisticProblem(data, n_classes=10)
    errors["logistic"] = gradient_check(logistic, rng.normal(logistic.d) * 0.1, idx, rng, directions=20)
    binary_problem = LogisticProblem(binary, n_classes=2)
    errors["binary"] = gradient_check(binary_problem, rng.normal(binary_problem.d) * 0.1, idx, rng, directions=20)
    mlp = MLPProblem(data, n_hidden=8)
    errors["mlp"] = gradient_check(mlp, mlp.initial_point(rng), idx, rng, directions=20)
    passed = errors["logistic"] <= 1e-5 and errors["binary"] <= 1e-5 and errors["mlp"] <= 1e-4
    observed = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    return CheckResult("gradient_finite_differences", passed, "agreement", observed, "1e-5 / 1e-4 rel")


def check_accountant_oracle(fault: Optional[str] = None) -> CheckResult:
    worst = 0.0
    for q, z, alpha in ((0.01, 1.0, 8.0), (0.05, 2.0, 4.5), (0.1, 1.5, 16.0)):
        closed = rdp_subsampled_gaussian(q, z, alpha)
        numeric = numerical_rdp_oracle(q, z, alpha)
        worst = max(worst, abs(closed - numeric) / numeric)
    return CheckResult("accountant_vs_integration", worst <= 0.05, "agreement", f"{worst:.2e}", "5% rel")


def check_theorem2_dual(fault: Optional[str] = None) -> CheckResult:
    rng = CounterStream(5, "analysis")
    worst = 0.0
    for _ in range(100):
        eta, kappa, gamma, L, beta = rng.uniform(5) * np.array([0.1, 1.0, 4.0, 2.0, 1.0]) + [1e-3, 1e-3, 0, 0.1, 0]
        a = c1(eta, kappa, gamma, L, beta)
        b = float(c1_exact(eta, kappa, gamma, L, beta))
        worst = max(worst, abs(a - b) / max(abs(b), 1.0))
    return CheckResult("theorem2_dual_evaluation", worst <= 1e-12, "agreement", f"{worst:.1e}", "1e-12 rel")


def check_fft_count(fault: Optional[str] = None) -> CheckResult:
    problem = QuadraticProblem.create(d=200, n=40, tau=0.1, seed=4)
    config = replace(_chain_config("fftkf", rho=0.5), steps=1)
    streams = ExperimentStreams(config.seed)
    ctx = StepContext(
        config=config,
        optimizer=config.base.fresh(),
        accountant=new_accountant(2),
        mask=config.filter.build(problem.d),
        noise_multiplier=config.noise_multiplier(),
    )
    state = kalman.initial_state(problem.d, 0.5, 1.0)
    x = problem.initial_point(streams.init)
    batch = draw_batch(streams.subsample, problem.n, config)
    before = problem.gradient_evaluations
    with count_transforms() as counter:
        step_fftkf(x, state, problem, batch, ctx, streams)
    evals = problem.gradient_evaluations - before
    passed = counter.forward == 1 and counter.inverse == 1 and evals == 2
    return CheckResult(
        "fftkf_step_cost", passed, "1 forward + 1 inverse FFT, 2 batch gradients",
        f"{counter.forward} + {counter.inverse} FFT, {evals} gradients", "exact",
    )


CHECKS: tuple[Callable[..., CheckResult], ...] = (
    check_fft_oracle,
    check_parseval_roundtrip,
    check_non_expansion,
    check_lemma1_reference,
    check_noise_reduction,
    check_reduction_chain,
    check_gradients,
    check_accountant_oracle,
    check_theorem2_dual,
    check_fft_count,
)


def run_suite(fault: Optional[str] = None) -> list[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"Unknown fault: {fault}. Available: {list(FAULTS)}")
    results = []
    for check in CHECKS:
        name = check.__name__.removeprefix("check_")
        try:
            result = check(fault)
        except Exception as exc:  # a crashing check is a failed check
            logger.debug("Check %s raised", name, exc_info=True)
            result = CheckResult(name, False, "no error", f"{type(exc).__name__}: {exc}", "-")
        logger.info("%s: %s", result.name, "PASS" if result.passed else "FAIL")
        results.append(result)
    return results
