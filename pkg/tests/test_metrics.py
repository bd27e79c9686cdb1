import csv
import os

import numpy as np
import pytest

from src.errors import FormatError, UsageError
from src.metrics import (
    MetricsRow,
    append_metrics,
    export_metrics,
    read_metrics,
    read_summary,
    write_metrics,
)


def _run(root, relpath, recipe, seed, top1s):
    run_dir = os.path.join(root, relpath)
    os.makedirs(run_dir, exist_ok=True)
    rows = [
        MetricsRow(epoch=i + 1, recipe=recipe, seed=seed, train_loss=1.0 / (i + 1), test_top1=t)
        for i, t in enumerate(top1s)
    ]
    write_metrics(os.path.join(run_dir, "metrics.csv"), rows)
    return rows


def _records(path):
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


class TestRows:
    def test_csv_round_trip(self, tmp_path):
        rows = _run(tmp_path, "r", "kd", 1, [10.5, 20.25])
        loaded, bad = read_metrics(os.path.join(tmp_path, "r", "metrics.csv"))
        assert bad == 0
        assert loaded == rows

    def test_append_writes_header_once(self, tmp_path):
        path = str(tmp_path / "metrics.csv")
        append_metrics(path, MetricsRow(1, "baseline", 0))
        append_metrics(path, MetricsRow(2, "baseline", 0))
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines[0].startswith("epoch,recipe,seed,train_loss")
        assert len(lines) == 3

    def test_malformed_records_counted(self, tmp_path):
        path = tmp_path / "metrics.csv"
        _run(tmp_path, "", "kd", 0, [50.0])
        with open(path, "a", encoding="utf-8") as f:
            f.write("2,kd,0,not-a-number,0,0,0,0,50.0,0.0\n")
            f.write("3,kd,0,0.1,0,0,0,0,140.0,0.0\n")
            f.write("4,kd\n")
        rows, bad = read_metrics(str(path))
        assert len(rows) == 1
        assert bad == 3

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text("a,b\n1,2\n", encoding="utf-8")
        with pytest.raises(FormatError):
            read_metrics(str(path))

    def test_out_of_range_accuracy(self):
        with pytest.raises(FormatError):
            MetricsRow(1, "kd", 0, test_top1=101.0).validate()


class TestExport:
    def test_single_run_is_identity(self, tmp_path):
        rows = _run(tmp_path, "kd/seed0", "kd", 0, [40.0, 60.0])
        all_path, summary_path, n_runs, bad = export_metrics(str(tmp_path))
        assert (n_runs, bad) == (1, 0)
        merged = _records(all_path)
        assert [r["epoch"] for r in merged] == ["1", "2"]
        assert all(r["group"] == "kd" and r["run"] == os.path.join("kd", "seed0") for r in merged)
        for record, row in zip(merged, rows):
            assert float(record["test_top1"]) == row.test_top1
        summary = read_summary(summary_path)
        assert len(summary) == 1
        assert summary[0]["top1_mean"] == 60.0
        assert summary[0]["top1_std"] == 0.0

    def test_three_seeds(self, tmp_path):
        for seed, final in enumerate([70.0, 72.0, 74.0]):
            _run(tmp_path, f"nkd/seed{seed}", "nkd", seed, [10.0, final])
        _, summary_path, n_runs, _ = export_metrics(str(tmp_path))
        summary = read_summary(summary_path)[0]
        assert n_runs == 3
        assert summary["n_runs"] == 3
        assert summary["top1_mean"] == pytest.approx(72.0)
        assert summary["top1_std"] == pytest.approx(2.0)
        assert summary["top1_per_seed"] == "0:70.0;1:72.0;2:74.0"

    def test_std_is_sample_std(self, tmp_path):
        _run(tmp_path, "dkd/seed0", "dkd", 0, [60.0])
        _run(tmp_path, "dkd/seed1", "dkd", 1, [64.0])
        _, summary_path, _, _ = export_metrics(str(tmp_path))
        summary = read_summary(summary_path)[0]
        assert summary["top1_mean"] == 62.0
        assert summary["top1_std"] == pytest.approx(np.std([60.0, 64.0], ddof=1))
        assert summary["top1_std"] == pytest.approx(2.0 * 2**0.5)

    def test_groups_and_recipes(self, tmp_path):
        _run(tmp_path, "a/seed0", "kd", 0, [50.0])
        _run(tmp_path, "b/seed0", "uskd", 0, [55.0])
        _, summary_path, _, _ = export_metrics(str(tmp_path))
        keys = [(r["group"], r["recipe"]) for r in read_summary(summary_path)]
        assert keys == [("a", "kd"), ("b", "uskd")]

    def test_malformed_rows_skipped(self, tmp_path):
        _run(tmp_path, "kd/seed0", "kd", 0, [50.0])
        with open(tmp_path / "kd" / "seed0" / "metrics.csv", "a", encoding="utf-8") as f:
            f.write("oops\n")
        _, _, n_runs, bad = export_metrics(str(tmp_path))
        assert (n_runs, bad) == (1, 1)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(UsageError):
            export_metrics(str(tmp_path))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(UsageError):
            export_metrics(str(tmp_path / "nothing"))
