"""Grid and variant sweeps over seeds, with optional worker processes."""

import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from src.config import TEACHER_RECIPES
from src.errors import ConfigError
from src.experiment import ExperimentConfig, apply_overrides
from src.fields import from_dict, require_int
from src.metrics import export_metrics
from src.persistence import load_json
from src.training import ensure_teacher, prepare_data, run

logger = logging.getLogger(__name__)


@dataclass
class SweepSpec:
    """A base experiment, the seeds to repeat it over, and either a grid or variants.

    ``grid`` maps dotted config keys to value lists (their product is swept);
    ``variants`` is a list of ``{"name": ..., "set": {dotted.key: value}}`` objects.
    ``base`` is a config path (relative to the sweep file) or an inline object.
    """

    base: object
    seeds: list = field(default_factory=lambda: [0])
    grid: dict = field(default_factory=dict)
    variants: list = field(default_factory=list)
    out_dir: str = "runs/sweep"
    workers: int = 1
    base_dir: Optional[str] = None

    def validate(self):
        """Needs at least one seed; grid and variants exclude each other."""
        if not self.seeds:
            raise ConfigError("a sweep needs at least one seed")
        for seed in self.seeds:
            require_int("seeds[]", seed)
        require_int("workers", self.workers, low=1)
        if self.grid and self.variants:
            raise ConfigError("give either grid or variants, not both")
        for key, values in self.grid.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid entry {key} must be a non-empty list")
        for variant in self.variants:
            if not isinstance(variant, dict) or "name" not in variant:
                raise ConfigError("every variant needs a name")


def _label(value):
    return value if isinstance(value, str) else json.dumps(value)


def groups(sweep):
    """``(group_name, overrides)`` for every grid point or variant, in file order."""
    if sweep.variants:
        return [(v["name"], list(v.get("set", {}).items())) for v in sweep.variants]
    if not sweep.grid:
        return [("base", [])]
    keys = list(sweep.grid)
    out = []
    for values in itertools.product(*(sweep.grid[k] for k in keys)):
        name = ",".join(f"{k}={_label(v)}" for k, v in zip(keys, values))
        out.append((name, list(zip(keys, values))))
    return out


def expand(sweep, overrides=()):
    """Every run of the sweep as ``(run_dir, config_dict)``."""
    base = sweep.base
    if isinstance(base, str):
        if sweep.base_dir and not os.path.isabs(base):
            base = os.path.join(sweep.base_dir, base)
        base = load_json(base)
    runs = []
    for name, group_overrides in groups(sweep):
        for seed in sweep.seeds:
            run_dir = os.path.join(sweep.out_dir, name, f"seed{seed}")
            pairs = list(overrides) + group_overrides + [("seed", seed), ("out_dir", run_dir)]
            data = apply_overrides(base, pairs)
            ExperimentConfig.from_dict(data)
            runs.append((run_dir, data))
    return runs


def _run_one(data):
    cfg = ExperimentConfig.from_dict(data)
    result = run(cfg)
    return cfg.out_dir, result.final.test_top1


def pretrain_teachers(configs):
    """Trains every missing teacher once, serially, before any student starts."""
    done = set()
    for cfg in configs:
        if cfg.recipe not in TEACHER_RECIPES or cfg.teacher_path in done:
            continue
        if cfg.teacher.train_if_missing and not os.path.exists(cfg.teacher_path):
            ensure_teacher(cfg, prepare_data(cfg.dataset))
        done.add(cfg.teacher_path)


def load_sweep(path, workers=None):
    data = load_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: a sweep file must be a JSON object")
    if workers is not None:
        data["workers"] = workers
    data["base_dir"] = os.path.dirname(os.path.abspath(path))
    return from_dict(SweepSpec, data)


def run_sweep(sweep, overrides=()):
    """Runs every grid point for every seed, then exports the merged metrics."""
    runs = expand(sweep, overrides)
    pretrain_teachers([ExperimentConfig.from_dict(data) for _, data in runs])
    logger.info("sweep: %d run(s) with %d worker(s)", len(runs), sweep.workers)
    if sweep.workers == 1:
        results = [_run_one(data) for _, data in runs]
    else:
        with ProcessPoolExecutor(max_workers=sweep.workers) as pool:
            results = list(pool.map(_run_one, [data for _, data in runs]))
    for run_dir, top1 in results:
        logger.info("%s: top-1 %.2f%%", run_dir, top1)
    return export_metrics(sweep.out_dir)
