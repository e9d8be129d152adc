#!/usr/bin/env python3
"""
FFTKF Harness - experiment runner, verification suite and benchmarks

Subcommands:
    train <config>     run every (arm x seed) cell, write per-cell CSVs + summary.csv
    verify             run the invariant suite and print a pass/fail table
    bench [--dims]     time apply_filter and full steps; check scaling and the step-cost split
    sweep <config>     rho x epsilon grid for the config's fftkf arm

Exit codes:
    0 success, 1 validation error, 2 verification failure, 3 infeasible privacy target

Usage:
    python -m src.pipeline.harness train configs/quadratic.ini --parallelism 4
    python -m src.pipeline.harness verify
    python -m src.pipeline.harness bench --dims 16384 32768 65536 131072
"""

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from src.tools import kalman
from src.tools.accountant import InfeasiblePrivacyTarget, new_accountant
from src.tools.privacy import PrivacyParams
from src.tools.problems import Problem, QuadraticProblem
from src.tools.rng import CounterStream, ExperimentStreams
from src.tools.spectral import apply_filter, build_mask, count_transforms, is_power_of_two
from src.utils.metrics import (
    MetricsLog,
    mean_stderr,
    median_time_ms,
    merge_csvs,
    summarize,
    write_summary,
    write_table,
)

from .config import ConfigError, ExperimentConfig, build_problem, load_config
from .optimizer import (
    BaseOptimizer,
    FilterParams,
    KalmanParams,
    MethodConfig,
    MethodConfigError,
    StepContext,
    TrainingResult,
    draw_batch,
    run,
    step_dpsgd,
    step_fftkf,
)
from .verify import FAULTS, run_suite

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_VERIFICATION = 2
EXIT_INFEASIBLE = 3

DEFAULT_BENCH_DIMS = (2**14, 2**15, 2**16, 2**17)
BENCH_HEADER = (
    "d",
    "filter_ms",
    "dpsgd_step_ms",
    "fftkf_step_ms",
    "extra_grad_ms",
    "overhead_ms",
    "predicted_overhead_ms",
    "fft_per_step",
    "grad_evals_per_step",
)
MAX_DOUBLING_RATIO = 2.5
DECOMPOSITION_SLACK = 0.5
SWEEP_HEADER = (
    "rho",
    "epsilon",
    "n_seeds",
    "final_loss_mean",
    "final_loss_stderr",
    "test_acc_mean",
    "test_acc_stderr",
    "noise_multiplier",
)


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


# ============================================================================
# Cells
# ============================================================================

def _run_cell(job: tuple[MethodConfig, Problem]) -> TrainingResult:
    config, problem = job
    return run(config, problem)


def run_cells(jobs: Sequence[tuple[MethodConfig, Problem]], parallelism: int = 1) -> list[TrainingResult]:
    """Run independent cells; results keep the order of jobs."""
    if parallelism <= 1 or len(jobs) <= 1:
        return [_run_cell(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(_run_cell, jobs))


def plan_cells(config: ExperimentConfig, problem: Problem) -> list[tuple[MethodConfig, Problem]]:
    """
    Resolve every arm (calibrating noise) before any training starts.

    Raises:
        InfeasiblePrivacyTarget: an arm's budget cannot be met
    """
    resolved = [config.method_config(arm, problem, seed=0) for arm in config.arms]
    return [(method.with_seed(seed), problem) for method in resolved for seed in config.experiment.seeds]


def write_outputs(
    results: Sequence[TrainingResult],
    output_dir: Path,
    emit_plot_data: bool = False,
) -> list[Path]:
    """Per-cell CSVs, summary.csv, arms.json and optionally curves.csv."""
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = [r.log.write_csv(output_dir / r.log.filename) for r in results]
    write_summary(output_dir / "summary.csv", [r.log for r in results])

    arms = {}
    for r in results:
        arms.setdefault(r.config.label, {**r.config.to_dict(), "noise_multiplier": r.noise_multiplier})
    for arm in arms.values():
        arm.pop("seed")
    (output_dir / "arms.json").write_text(json.dumps(arms, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    if emit_plot_data:
        merge_csvs(paths, output_dir / "curves.csv")
    return paths


def _print_summary(logs: Sequence[MetricsLog]) -> None:
    print(f"\n{'arm':<20} {'seeds':>5} {'final loss':>22} {'test acc':>20} {'epsilon':>9}")
    for arm, n, loss, loss_se, _, _, acc, acc_se, eps in summarize(logs):
        acc_text = "-" if math.isnan(acc) else f"{acc:.4f} ± {acc_se:.4f}"
        print(f"{arm:<20} {n:>5} {loss:>12.5g} ± {loss_se:<7.2g} {acc_text:>20} {eps:>9.4g}")


# ============================================================================
# Subcommands
# ============================================================================

def _load(args) -> ExperimentConfig:
    return load_config(
        Path(args.config),
        seed_override=args.seed_override,
        output_dir=Path(args.output_dir) if args.output_dir else None,
        parallelism=args.parallelism,
        subset_n=args.subset_n,
    )


def cmd_train(args) -> int:
    config = _load(args)
    problem = build_problem(config.problem)
    logger.info("Problem %s", problem.describe())
    jobs = plan_cells(config, problem)

    results = run_cells(jobs, config.experiment.parallelism)
    output_dir = config.experiment.output_dir
    paths = write_outputs(results, output_dir, config.experiment.emit_plot_data)

    _print_summary([r.log for r in results])
    print(f"\n✅ {len(paths)} cell CSVs + summary.csv written to {output_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load(args)
    if config.sweep is None:
        raise ConfigError(["sweep: section is missing"])
    problem = build_problem(config.problem)
    base = config.arm(config.sweep.base_arm)

    grid = []
    jobs = []
    for eps in config.sweep.epsilon_grid:
        for rho in config.sweep.rho_grid:
            arm = base.model_copy(update={"rho": rho, "name": f"{base.name}_rho{rho:g}_eps{eps:g}"})
            method = config.method_config(arm, problem, seed=0, target_epsilon=eps)
            grid.append((rho, eps, method))
            jobs.extend((method.with_seed(s), problem) for s in config.experiment.seeds)

    results = run_cells(jobs, config.experiment.parallelism)
    output_dir = config.experiment.output_dir
    write_outputs(results, output_dir, config.experiment.emit_plot_data)

    rows = []
    for rho, eps, method in grid:
        cell = [r for r in results if r.config.label == method.label]
        finals = [r.log.final() for r in cell]
        loss = mean_stderr([f["train_loss"] for f in finals])
        acc = mean_stderr([f["test_acc"] for f in finals])
        rows.append((rho, eps, len(cell), *loss, *acc, method.noise_multiplier()))
    write_table(output_dir / "sweep.csv", SWEEP_HEADER, rows)

    _print_summary([r.log for r in results])
    print(f"\n✅ {len(rows)} grid points written to {output_dir / 'sweep.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suite(fault=args.inject_fault)
    width = max(len(r.name) for r in results)
    print(f"\n{'check':<{width}}  status  observed (expected, tolerance)")
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status:<6}  {r.observed} ({r.expected}, {r.tolerance})")
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"\n⚠️  {len(failed)} of {len(results)} checks failed")
        return EXIT_VERIFICATION
    print(f"\n✅ All {len(results)} checks passed")
    return EXIT_OK


def _bench_config(method: str, batch_size: int, n: int) -> MethodConfig:
    privacy = PrivacyParams(
        clip_C=1.0,
        sigma_w=0.01,
        sigma_fd=0.02,
        sampling_rate_q=batch_size / n,
        target_epsilon=4.0,
        target_delta=1e-5,
    )
    return MethodConfig(
        method=method,
        privacy=privacy,
        base=BaseOptimizer("sgd", 0.1),
        steps=1,
        batch_size=batch_size,
        sampling="fixed",
        filter=FilterParams() if method == "fftkf" else None,
        kalman=KalmanParams() if method == "fftkf" else None,
    )


def bench_dimension(d: int, batch_size: int = 32, repeats: int = 5) -> dict:
    """
    Median timings at dimension d: one filter application, one dpsgd and one
    fftkf step, and the privatized finite-difference gradient on its own.

    The fftkf overhead over dpsgd should be about one extra batch gradient
    plus the FFT pair (extra_grad_ms + filter_ms).
    """
    n = 4 * batch_size
    problem = QuadraticProblem.create(d=d, n=n, tau=0.0, seed=0, rotate=False)
    mask = build_mask(d, 0.5, 0.5)
    v = CounterStream(0, "analysis").normal(d)
    filter_ms = median_time_ms(lambda: apply_filter(v, mask), repeats)

    streams = ExperimentStreams(0)
    x = problem.initial_point(streams.init)
    timings = {}
    for method in ("dpsgd", "fftkf"):
        config = _bench_config(method, batch_size, n)
        ctx = StepContext(
            config=config,
            optimizer=config.base.fresh(),
            accountant=new_accountant(config.releases_per_step),
            mask=config.filter.build(d) if config.filter else None,
        )
        batch = draw_batch(streams.subsample, n, config)
        if method == "dpsgd":
            timings[method] = median_time_ms(lambda: step_dpsgd(x, problem, batch, ctx, streams), repeats)
            continue
        state = kalman.initial_state(d, config.kalman.kappa, config.kalman.gamma)
        timings[method] = median_time_ms(lambda: step_fftkf(x, state, problem, batch, ctx, streams), repeats)

        p = config.privacy
        grads_x = problem.per_sample_gradients(x, batch)

        def extra_gradient():
            shifted = problem.per_sample_gradients(x + state.gamma * state.d_prev, batch)
            return kalman.predict(
                state, grads_x, shifted, p.clip_C, p.sigma_fd, streams.noise_fd, batch_size=batch_size
            )

        extra_grad_ms = median_time_ms(extra_gradient, repeats)
        before = problem.gradient_evaluations
        with count_transforms() as counter:
            step_fftkf(x, state, problem, batch, ctx, streams)
        fft_per_step = counter.total
        grad_evals = problem.gradient_evaluations - before

    return {
        "d": d,
        "filter_ms": filter_ms,
        "dpsgd_step_ms": timings["dpsgd"],
        "fftkf_step_ms": timings["fftkf"],
        "extra_grad_ms": extra_grad_ms,
        "overhead_ms": timings["fftkf"] - timings["dpsgd"],
        "predicted_overhead_ms": extra_grad_ms + filter_ms,
        "fft_per_step": fft_per_step,
        "grad_evals_per_step": grad_evals,
    }


def decomposition_holds(row: dict, slack: float = DECOMPOSITION_SLACK) -> bool:
    """fftkf - dpsgd step time within slack of one extra gradient plus the FFT pair."""
    predicted = row["predicted_overhead_ms"]
    return abs(row["overhead_ms"] - predicted) <= slack * predicted


def scaling_ratios(rows: Sequence[dict]) -> list[tuple[int, int, float]]:
    """(d, next d, filter time ratio) for consecutive rows."""
    return [(prev["d"], cur["d"], cur["filter_ms"] / prev["filter_ms"]) for prev, cur in zip(rows, rows[1:])]


def fitted_exponent(dims: Sequence[int], times_ms: Sequence[float]) -> float:
    """Slope of log t against log(d log d); about 1 for O(d log d) cost."""
    work = np.array([d * math.log2(d) for d in dims], dtype=np.float64)
    return float(np.polyfit(np.log(work), np.log(np.asarray(times_ms)), 1)[0])


def cmd_bench(args) -> int:
    dims = list(args.dims)
    bad = [d for d in dims if not is_power_of_two(d)]
    if bad:
        print(f"Error: dims must be powers of two, got {bad}")
        return EXIT_VALIDATION

    rows = []
    for d in dims:
        row = bench_dimension(d, batch_size=args.batch_size, repeats=args.repeats)
        logger.info("bench d=%d: %s", d, row)
        rows.append(row)

    output_dir = Path(args.output_dir or "results/bench")
    write_table(output_dir / "bench.csv", BENCH_HEADER, [tuple(r[h] for h in BENCH_HEADER) for r in rows])

    print(
        f"\n{'d':>8} {'filter ms':>10} {'dpsgd ms':>10} {'fftkf ms':>10} "
        f"{'overhead':>10} {'predicted':>10} {'FFTs':>5} {'grads':>6}"
    )
    for r in rows:
        print(
            f"{r['d']:>8} {r['filter_ms']:>10.3f} {r['dpsgd_step_ms']:>10.3f} {r['fftkf_step_ms']:>10.3f} "
            f"{r['overhead_ms']:>10.3f} {r['predicted_overhead_ms']:>10.3f} "
            f"{r['fft_per_step']:>5} {r['grad_evals_per_step']:>6}"
        )

    failures = []
    for prev_d, d, ratio in scaling_ratios(rows):
        print(f"   filter time ratio d={prev_d} -> {d}: {ratio:.2f}")
        if ratio > MAX_DOUBLING_RATIO:
            failures.append(f"filter time ratio {ratio:.2f} > {MAX_DOUBLING_RATIO} for d={prev_d} -> {d}")
    if len(rows) >= 2:
        print(f"   fitted exponent vs d log d: {fitted_exponent(dims, [r['filter_ms'] for r in rows]):.2f}")
    for r in rows:
        if not decomposition_holds(r):
            failures.append(
                f"d={r['d']}: fftkf overhead {r['overhead_ms']:.3f} ms vs one gradient + FFT pair "
                f"{r['predicted_overhead_ms']:.3f} ms (slack {DECOMPOSITION_SLACK:.0%})"
            )
        if r["fft_per_step"] != 2 or r["grad_evals_per_step"] != 2:
            failures.append(
                f"d={r['d']}: {r['fft_per_step']} FFTs and {r['grad_evals_per_step']} batch gradients per fftkf step"
            )

    print(f"\n   timings written to {output_dir / 'bench.csv'}")
    if failures:
        for message in failures:
            print(f"⚠️  {message}")
        return EXIT_VERIFICATION
    print("✅ Scaling and step-cost decomposition within bounds")
    return EXIT_OK


# ============================================================================
# Entry point
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="FFT-shaped Kalman filtering for differentially private optimization",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Paired comparison on the synthetic quadratic
  python -m src.pipeline.harness train configs/quadratic.ini

  # Same config, more seeds, 4 worker processes
  python -m src.pipeline.harness train configs/quadratic.ini --seed-override 0 1 2 3 4 --parallelism 4

  # Invariant suite, and the same suite with a broken mask
  python -m src.pipeline.harness verify
  python -m src.pipeline.harness verify --inject-fault asymmetric-mask

Environment:
  FFTKF_DATA_ROOT   directory holding the MNIST IDX files (default ./data/mnist)
        """,
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("train", "Run all arms and seeds"), ("sweep", "rho x epsilon grid")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="INI experiment file")
        p.add_argument("--seed-override", nargs="+", type=int, help="Replace the config's seed list")
        p.add_argument("--output-dir", help="Replace the config's output directory")
        p.add_argument("--parallelism", type=int, help="Worker processes")
        p.add_argument("--subset-n", type=int, help="Truncate the training set to N examples")

    p = sub.add_parser("verify", help="Run the invariant suite")
    p.add_argument("--inject-fault", choices=FAULTS, help="Deliberately break a component (suite self-test)")

    p = sub.add_parser("bench", help="Time the filter and full steps")
    p.add_argument("--dims", nargs="+", type=int, default=list(DEFAULT_BENCH_DIMS), help="Powers of two")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--output-dir", help="Directory for bench.csv (default results/bench)")
    return parser


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "verify": cmd_verify, "bench": cmd_bench}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print("Error: invalid configuration")
        for message in e.messages:
            print(f"   {message}")
        return EXIT_VALIDATION
    except InfeasiblePrivacyTarget as e:
        print(f"Error: {e}")
        return EXIT_INFEASIBLE
    except (MethodConfigError, ValueError) as e:
        print(f"Error: {e}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
