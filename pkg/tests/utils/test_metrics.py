"""Tests for src/utils/metrics.py"""

import math

import numpy as np
import pytest

from src.utils.metrics import (
    CSV_HEADER,
    SUMMARY_HEADER,
    MetricsLog,
    format_value,
    mean_stderr,
    median_time_ms,
    merge_csvs,
    read_table,
    summarize,
    write_summary,
    write_table,
)


def make_log(arm="fftkf", seed=0, losses=(1.0, 0.5), accs=(None, 0.8)):
    log = MetricsLog(arm=arm, seed=seed)
    for step, (loss, acc) in enumerate(zip(losses, accs), start=1):
        log.append(step=step, train_loss=loss, test_acc=acc, epsilon_spent=0.1 * step)
    return log


class TestFormatValue:
    def test_float_round_trips(self):
        assert float(format_value(0.1 + 0.2)) == 0.1 + 0.2

    def test_nan(self):
        assert format_value(float("nan")) == "nan"

    def test_numpy_scalars(self):
        assert format_value(np.float64(0.25)) == "0.25"
        assert format_value(np.int64(3)) == "3"


class TestMetricsLog:
    def test_rows_and_filename(self):
        log = make_log()
        assert len(log) == 2
        assert log.filename == "fftkf__seed0.csv"

    def test_epsilon_must_not_decrease(self):
        log = MetricsLog(arm="a", seed=0)
        log.append(step=1, train_loss=1.0, epsilon_spent=0.5)
        with pytest.raises(ValueError, match="decreased"):
            log.append(step=2, train_loss=1.0, epsilon_spent=0.4)

    def test_final_uses_last_recorded_accuracy(self):
        log = make_log(losses=(1.0, 0.5, 0.25), accs=(0.7, 0.9, None))
        final = log.final()
        assert final["train_loss"] == 0.25
        assert final["test_acc"] == 0.9

    def test_empty_final(self):
        final = MetricsLog(arm="a", seed=0).final()
        assert math.isnan(final["train_loss"]) and final["epsilon_spent"] == 0.0

    def test_csv_layout(self, tmp_path):
        path = make_log().write_csv(tmp_path / "cell.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(CSV_HEADER)
        assert len(lines) == 3
        rows = read_table(path)
        assert rows[0]["test_acc"] == "nan"
        assert rows[1]["test_acc"] == "0.8"

    def test_identical_bytes(self, tmp_path):
        a = make_log().write_csv(tmp_path / "a.csv")
        b = make_log().write_csv(tmp_path / "b.csv")
        assert a.read_bytes() == b.read_bytes()

    def test_column(self):
        np.testing.assert_array_equal(make_log().column("train_loss"), [1.0, 0.5])


class TestSummaries:
    def test_mean_stderr(self):
        mean, stderr = mean_stderr([1.0, 2.0, 3.0])
        assert mean == 2.0
        assert stderr == pytest.approx(1.0 / math.sqrt(3))

    def test_single_value_has_zero_stderr(self):
        assert mean_stderr([4.0]) == (4.0, 0.0)

    def test_all_nan(self):
        assert all(math.isnan(v) for v in mean_stderr([float("nan")]))

    def test_summarize_groups_by_arm(self):
        logs = [make_log("dpsgd", 0), make_log("fftkf", 0), make_log("dpsgd", 1, losses=(1.0, 0.7))]
        rows = summarize(logs)
        assert [r[0] for r in rows] == ["dpsgd", "fftkf"]
        assert rows[0][1] == 2
        assert rows[0][2] == pytest.approx(0.6)

    def test_write_summary(self, tmp_path):
        path = write_summary(tmp_path / "summary.csv", [make_log()])
        rows = read_table(path)
        assert list(rows[0]) == list(SUMMARY_HEADER)
        assert rows[0]["n_seeds"] == "1"

    def test_merge(self, tmp_path):
        a = make_log("a").write_csv(tmp_path / "a.csv")
        b = make_log("b").write_csv(tmp_path / "b.csv")
        merged = merge_csvs([a, b], tmp_path / "curves.csv")
        assert len(read_table(merged)) == 4

    def test_write_table(self, tmp_path):
        path = write_table(tmp_path / "t.csv", ("x", "y"), [(1, np.float64(0.5))])
        assert path.read_text() == "x,y\n1,0.5\n"


def test_median_time_ms():
    calls = []
    assert median_time_ms(lambda: calls.append(1), repeats=3) >= 0.0
    assert len(calls) == 3
