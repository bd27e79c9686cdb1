"""Command handlers: each takes the arguments after the command name."""

import argparse
import logging

from src.config import EXIT_NUMERICAL_FAILURE, GRADCHECK_COORDS
from src.decorators import input_error
from src.experiment import load_config
from src.gradcheck import gradcheck
from src.metrics import export_metrics
from src.parser import parse_overrides
from src.sweep import load_sweep, run_sweep
from src.training import evaluate_checkpoint, run

logger = logging.getLogger(__name__)


def _parser(prog, *positional):
    parser = argparse.ArgumentParser(prog=prog)
    for name, help_text in positional:
        parser.add_argument(name, help=help_text)
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value (dotted key, JSON value)",
    )
    return parser


@input_error
def run_experiment(args):
    parser = _parser("run", ("config", "experiment JSON file"))
    parser.add_argument("--out", help="run directory (overrides out_dir)")
    opts = parser.parse_args(args)
    overrides = parse_overrides(opts.overrides)
    if opts.out:
        overrides.append(("out_dir", opts.out))
    cfg = load_config(opts.config, overrides)
    result = run(cfg)
    row = result.final
    return (
        f"{cfg.recipe} seed {cfg.seed}: {row.epoch} epoch(s), train loss {row.train_loss:.4f}, "
        f"test top-1 {row.test_top1:.2f}%\ncheckpoint: {result.checkpoint}"
    )


@input_error
def run_gradcheck(args):
    parser = _parser("gradcheck", ("config", "experiment JSON file"))
    parser.add_argument("--coords", type=int, default=GRADCHECK_COORDS)
    opts = parser.parse_args(args)
    cfg = load_config(opts.config, parse_overrides(opts.overrides))
    report = gradcheck(cfg, coords=opts.coords)
    if not report.passed:
        return EXIT_NUMERICAL_FAILURE, report.format()
    return report.format()


@input_error
def run_eval(args):
    parser = _parser(
        "eval",
        ("checkpoint", "checkpoint file"),
        ("config", "experiment JSON file whose dataset section is evaluated"),
    )
    parser.add_argument("--split", choices=["train", "test"], default="test")
    opts = parser.parse_args(args)
    cfg = load_config(opts.config, parse_overrides(opts.overrides))
    top1, checkpoint = evaluate_checkpoint(opts.checkpoint, cfg.dataset, opts.split)
    logged = checkpoint.metadata.get("test_top1")
    text = f"{opts.checkpoint}: {opts.split} top-1 {top1:.2f}%"
    if logged is not None:
        text += f" (logged at training time: {logged:.2f}%)"
    return text


@input_error
def run_export(args):
    parser = argparse.ArgumentParser(prog="export-metrics")
    parser.add_argument("directory")
    opts = parser.parse_args(args)
    all_path, summary_path, n_runs, malformed = export_metrics(opts.directory)
    text = f"merged {n_runs} run(s) into {all_path}\nsummary: {summary_path}"
    if malformed:
        text += f"\nskipped {malformed} malformed record(s)"
    return text


@input_error
def run_sweep_file(args):
    parser = _parser("sweep", ("sweep_file", "sweep JSON file"))
    parser.add_argument("--workers", type=int)
    opts = parser.parse_args(args)
    sweep = load_sweep(opts.sweep_file, opts.workers)
    _, summary_path, n_runs, _ = run_sweep(sweep, parse_overrides(opts.overrides))
    return f"sweep finished: {n_runs} run(s); summary: {summary_path}"
