"""Per-epoch metrics rows, their CSV files, and the cross-run export."""

import csv
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from src.config import (
    ALL_METRICS_FILE,
    METRICS_COLUMNS,
    METRICS_FILE,
    STEPS_COLUMNS,
    SUMMARY_COLUMNS,
    SUMMARY_FILE,
)
from src.errors import FormatError, UsageError

logger = logging.getLogger(__name__)

_FLOAT_COLUMNS = [c for c in METRICS_COLUMNS if c not in ("epoch", "recipe", "seed")]


def _fmt(value):
    return repr(float(value))


@dataclass
class MetricsRow:
    """One epoch of one run; ``test_top1`` is a percentage."""

    epoch: int
    recipe: str
    seed: int
    train_loss: float = 0.0
    l_ori: float = 0.0
    l_target: float = 0.0
    l_non: float = 0.0
    l_weak: float = 0.0
    test_top1: float = 0.0
    wall_seconds: float = 0.0

    def validate(self):
        """Rejects accuracies outside [0, 100] and non-finite losses."""
        if not 0.0 <= self.test_top1 <= 100.0:
            raise FormatError(f"test_top1 {self.test_top1} outside [0, 100]")
        if not all(math.isfinite(getattr(self, c)) for c in _FLOAT_COLUMNS):
            raise FormatError(f"non-finite value in metrics row for epoch {self.epoch}")

    def to_csv_dict(self):
        out = {"epoch": str(self.epoch), "recipe": self.recipe, "seed": str(self.seed)}
        out.update({c: _fmt(getattr(self, c)) for c in _FLOAT_COLUMNS})
        return out

    @classmethod
    def from_csv_dict(cls, record):
        """Parses one CSV record; any missing or malformed field is a FormatError."""
        try:
            row = cls(
                epoch=int(record["epoch"]),
                recipe=record["recipe"],
                seed=int(record["seed"]),
                **{c: float(record[c]) for c in _FLOAT_COLUMNS},
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed metrics record {record!r}") from e
        row.validate()
        return row


def write_metrics(path, rows):
    """Writes a metrics CSV with the fixed column order."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_csv_dict())


def append_metrics(path, row):
    """Appends one row, writing the header first when the file is new."""
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow(row.to_csv_dict())


def append_steps(path, records):
    """Appends per-step loss records (dicts keyed by ``STEPS_COLUMNS``)."""
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=STEPS_COLUMNS, lineterminator="\n")
        if new:
            writer.writeheader()
        for record in records:
            writer.writerow(
                {k: v if k in ("epoch", "step") else _fmt(v) for k, v in record.items()}
            )


def read_metrics(path):
    """Returns ``(rows, malformed_count)``; malformed records are skipped."""
    rows, bad = [], 0
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or list(reader.fieldnames)[: len(METRICS_COLUMNS)] != (
            METRICS_COLUMNS
        ):
            raise FormatError(f"{path}: header is not {','.join(METRICS_COLUMNS)}")
        for record in reader:
            if None in record or None in record.values():
                bad += 1
                continue
            try:
                rows.append(MetricsRow.from_csv_dict(record))
            except FormatError:
                bad += 1
    return rows, bad


def find_runs(root):
    """Run directories (those holding a metrics file) under ``root``, sorted."""
    runs = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        if METRICS_FILE in filenames:
            runs.append(dirpath)
    return sorted(runs)


def _mean_std(values):
    """Mean and sample standard deviation (0.0 for a single run)."""
    data = np.asarray(values, dtype=np.float64)
    std = float(np.std(data, ddof=1)) if data.size > 1 else 0.0
    return float(np.mean(data)), std


def export_metrics(root):
    """Merges every run's metrics under ``root`` and summarizes final epochs per group.

    Writes ``all_metrics.csv`` (group, run, then the metrics columns) and
    ``summary.csv`` (mean and sample standard deviation over seeds). Returns
    ``(all_path, summary_path, n_runs, n_malformed)``.
    """
    runs = find_runs(root) if os.path.isdir(root) else []
    if not runs:
        raise UsageError(f"no {METRICS_FILE} files under {root}")
    merged, finals, malformed = [], {}, 0
    for run_dir in runs:
        try:
            rows, bad = read_metrics(os.path.join(run_dir, METRICS_FILE))
        except FormatError as e:
            logger.warning("skipping %s: %s", run_dir, e)
            malformed += 1
            continue
        malformed += bad
        run = os.path.relpath(run_dir, root)
        group = os.path.dirname(run) or "."
        for row in rows:
            merged.append({"group": group, "run": run, **row.to_csv_dict()})
        if rows:
            last = max(rows, key=lambda r: r.epoch)
            finals.setdefault((group, last.recipe), []).append(last)
    if malformed:
        logger.warning("skipped %d malformed metrics record(s)", malformed)

    all_path = os.path.join(root, ALL_METRICS_FILE)
    with open(all_path, "w", encoding="utf-8", newline="") as f:
        columns = ["group", "run"] + METRICS_COLUMNS
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(merged)

    summary_path = os.path.join(root, SUMMARY_FILE)
    with open(summary_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for (group, recipe), rows in sorted(finals.items()):
            rows = sorted(rows, key=lambda r: r.seed)
            top1_mean, top1_std = _mean_std([r.test_top1 for r in rows])
            loss_mean, loss_std = _mean_std([r.train_loss for r in rows])
            writer.writerow(
                {
                    "group": group,
                    "recipe": recipe,
                    "n_runs": len(rows),
                    "top1_mean": _fmt(top1_mean),
                    "top1_std": _fmt(top1_std),
                    "train_loss_mean": _fmt(loss_mean),
                    "train_loss_std": _fmt(loss_std),
                    "top1_per_seed": ";".join(f"{r.seed}:{_fmt(r.test_top1)}" for r in rows),
                }
            )
    logger.info("exported %d run(s) from %s", len(runs), root)
    return all_path, summary_path, len(runs), malformed


def read_summary(path):
    """Summary rows as dicts with numeric fields converted."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        out = []
        for record in csv.DictReader(f):
            record["n_runs"] = int(record["n_runs"])
            for key in ("top1_mean", "top1_std", "train_loss_mean", "train_loss_std"):
                record[key] = float(record[key])
            out.append(record)
    return out
