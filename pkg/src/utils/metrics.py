"""
Metrics logging and CSV persistence.

One CSV per (arm, seed) cell with a fixed header and column order. Floats
are written with repr(), which is locale independent and round-trips
exactly, so two runs with the same seed produce identical bytes.

Usage:
    from src.utils.metrics import MetricsLog, write_summary

    log = MetricsLog(arm="fftkf", seed=0)
    log.append(step=1, train_loss=0.42, epsilon_spent=0.1)
    log.write_csv(output_dir / log.filename)
"""

import csv
import math
import statistics
import time
from dataclasses import dataclass, field, astuple, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

NAN = float("nan")


def format_value(value) -> str:
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class MetricsRow:
    arm: str
    seed: int
    step: int
    train_loss: float
    grad_error: float = NAN
    test_acc: float = NAN
    epsilon_spent: float = 0.0
    wall_ms: float = NAN


CSV_HEADER = tuple(f.name for f in fields(MetricsRow))


@dataclass
class MetricsLog:
    """Per-step records of one training run."""
    arm: str
    seed: int
    rows: list[MetricsRow] = field(default_factory=list)

    def append(
        self,
        step: int,
        train_loss: float,
        grad_error: Optional[float] = None,
        test_acc: Optional[float] = None,
        epsilon_spent: float = 0.0,
        wall_ms: Optional[float] = None,
    ) -> MetricsRow:
        if self.rows and epsilon_spent < self.rows[-1].epsilon_spent:
            raise ValueError(
                f"epsilon_spent decreased at step {step}: {self.rows[-1].epsilon_spent} -> {epsilon_spent}"
            )
        row = MetricsRow(
            arm=self.arm,
            seed=self.seed,
            step=step,
            train_loss=float(train_loss),
            grad_error=NAN if grad_error is None else float(grad_error),
            test_acc=NAN if test_acc is None else float(test_acc),
            epsilon_spent=float(epsilon_spent),
            wall_ms=NAN if wall_ms is None else float(wall_ms),
        )
        self.rows.append(row)
        return row

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def filename(self) -> str:
        return f"{self.arm}__seed{self.seed}.csv"

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def final(self) -> dict:
        """Last train loss / grad error / epsilon and last recorded test accuracy."""
        if not self.rows:
            return {"train_loss": NAN, "grad_error": NAN, "test_acc": NAN, "epsilon_spent": 0.0}
        accuracies = [r.test_acc for r in self.rows if not math.isnan(r.test_acc)]
        last = self.rows[-1]
        return {
            "train_loss": last.train_loss,
            "grad_error": last.grad_error,
            "test_acc": accuracies[-1] if accuracies else NAN,
            "epsilon_spent": last.epsilon_spent,
        }

    def write_csv(self, path: Path) -> Path:
        write_rows(path, self.rows)
        return path


def write_rows(path: Path, rows: Iterable[MetricsRow]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow([format_value(v) for v in astuple(row)])


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Generic fixed-header CSV with locale-independent numbers."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
    return path


def read_table(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def merge_csvs(paths: Sequence[Path], output: Path) -> Path:
    """Concatenate per-cell CSVs (same header) into one plot-ready file."""
    output.parent.mkdir(parents=True, exist_ok=True)
    with open(output, "w", newline="", encoding="utf-8") as out:
        out.write(",".join(CSV_HEADER) + "\n")
        for path in paths:
            with open(path, encoding="utf-8") as f:
                next(f)
                for line in f:
                    out.write(line)
    return output


# ============================================================================
# Summary statistics
# ============================================================================

def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error over finite values; stderr is 0 for one value."""
    finite = [v for v in values if not math.isnan(v)]
    if not finite:
        return NAN, NAN
    if len(finite) == 1:
        return float(finite[0]), 0.0
    return float(statistics.fmean(finite)), float(statistics.stdev(finite) / math.sqrt(len(finite)))


SUMMARY_HEADER = (
    "arm",
    "n_seeds",
    "final_loss_mean",
    "final_loss_stderr",
    "grad_error_mean",
    "grad_error_stderr",
    "test_acc_mean",
    "test_acc_stderr",
    "epsilon_spent",
)


def summarize(logs: Sequence[MetricsLog]) -> list[tuple]:
    """One row per arm, arms in first-seen order."""
    by_arm: dict[str, list[MetricsLog]] = {}
    for log in logs:
        by_arm.setdefault(log.arm, []).append(log)

    rows = []
    for arm, arm_logs in by_arm.items():
        finals = [log.final() for log in arm_logs]
        loss = mean_stderr([f["train_loss"] for f in finals])
        err = mean_stderr([f["grad_error"] for f in finals])
        acc = mean_stderr([f["test_acc"] for f in finals])
        eps = max(f["epsilon_spent"] for f in finals)
        rows.append((arm, len(arm_logs), *loss, *err, *acc, eps))
    return rows


def write_summary(path: Path, logs: Sequence[MetricsLog]) -> Path:
    return write_table(path, SUMMARY_HEADER, summarize(logs))


# ============================================================================
# Timing
# ============================================================================

def median_time_ms(fn: Callable[[], object], repeats: int = 5) -> float:
    """Median wall time of fn() over `repeats` calls, monotonic clock."""
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1000.0)
    return float(statistics.median(samples))
