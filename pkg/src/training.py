"""Recipe objectives, the training loop, evaluation and teacher management."""

import logging
import os
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.config import (
    CHECKPOINT_FILE,
    CONFIG_FILE,
    METRICS_FILE,
    SEED_STREAM_INIT,
    SEED_STREAM_TEACHER_INIT,
    STEPS_FILE,
    TEACHER_RECIPES,
)
from src.data import (
    BatchPlan,
    Dataset,
    batches,
    channel_stats,
    load_cifar_binary,
    load_idx,
    normalize,
    smooth_labels,
    subsample,
    synthetic_dataset,
)
from src.errors import ConfigError, NumericalError, UsageError
from src.kd_losses import ce_loss, combine, dkd_loss, kd_loss, kd_tempered_loss, total_kd_objective
from src.metrics import MetricsRow, append_metrics, append_steps
from src.nets import (
    OptimState,
    evaluate_logits,
    forward_with_tap,
    init_params,
    sgd_step,
    step_decay_lr,
    weak_forward,
)
from src.numkit import softmax_stable
from src.persistence import Checkpoint, load_checkpoint, save_checkpoint, save_json
from src.tape import TapeGraph
from src.uskd_labels import uskd_total_loss

logger = logging.getLogger(__name__)

COMPONENTS = ("l_ori", "l_target", "l_non", "l_weak")


@dataclass
class DataBundle:
    """Normalized splits plus the training-split statistics used to normalize them."""

    train: Dataset
    test: Dataset
    mean: np.ndarray
    std: np.ndarray


@dataclass
class Objective:
    """One recorded batch objective: the tape, its loss node, and the loss breakdown."""

    tape: TapeGraph
    loss: object
    logits: object
    weak: Optional[object]
    result: object


@dataclass
class RunResult:
    final: MetricsRow
    rows: list
    checkpoint: str


def load_split(dataset_cfg, split):
    """Loads one split as described by a ``DatasetConfig`` (before subsampling)."""
    d = dataset_cfg
    train = split == "train"
    if d.format == "idx":
        images, labels = (
            (d.train_images, d.train_labels) if train else (d.test_images, d.test_labels)
        )
        return load_idx(images, labels, split, d.num_classes)
    if d.format == "cifar":
        return load_cifar_binary(d.train_files if train else d.test_files, split, d.num_classes)
    n = d.synthetic_train if train else d.synthetic_test
    return synthetic_dataset(n, d.num_classes, d.image_shape, d.data_seed, split, d.noise)


def prepare_data(dataset_cfg):
    """Loads, subsamples and normalizes both splits with training-split statistics."""
    seed = dataset_cfg.data_seed
    train = subsample(load_split(dataset_cfg, "train"), dataset_cfg.train_subset, seed)
    test = subsample(load_split(dataset_cfg, "test"), dataset_cfg.test_subset, seed)
    if dataset_cfg.normalize:
        mean, std = channel_stats(train)
    else:
        channels = train.input_shape[0]
        mean, std = np.zeros(channels), np.ones(channels)
    return DataBundle(normalize(train, mean, std), normalize(test, mean, std), mean, std)


def check_spec(spec, dataset, what="model"):
    if spec.num_classes != dataset.num_classes:
        raise ConfigError(
            f"{what} has {spec.num_classes} classes but the dataset has {dataset.num_classes}"
        )
    if spec.input_shape != dataset.input_shape:
        raise ConfigError(
            f"{what} expects inputs {spec.input_shape}, dataset holds {dataset.input_shape}"
        )


def evaluate(spec, params, dataset):
    """Top-1 accuracy in percent; argmax ties go to the lowest class index."""
    logits = evaluate_logits(spec, params, dataset.images)
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def teacher_probs(teacher, data, images):
    """Teacher softmax for a normalized student batch (renormalized if stats differ)."""
    same = np.array_equal(teacher.norm_mean, data.mean) and np.array_equal(
        teacher.norm_std, data.std
    )
    if not same:
        raw = images * data.std[None, :, None, None] + data.mean[None, :, None, None]
        images = (raw - teacher.norm_mean[None, :, None, None]) / teacher.norm_std[
            None, :, None, None
        ]
    return softmax_stable(evaluate_logits(teacher.spec, teacher.params, images))


def recipe_loss(cfg, logits, targets, probs=None, weak_logits=None, labels=None):
    """Batch-mean loss of ``cfg.recipe`` with its student (and weak) logit gradients."""
    recipe = cfg.recipe
    if recipe in TEACHER_RECIPES and probs is None:
        raise UsageError(f"recipe {recipe} needs teacher probabilities")
    S = softmax_stable(logits)
    if recipe == "baseline":
        result = ce_loss(S, targets)
    elif recipe == "ls":
        result = kd_loss(smooth_labels(targets, S.shape[1], cfg.label_smoothing), S)
        result.components = {"l_ori": result.value}
    elif recipe == "kd":
        kd = kd_tempered_loss(probs, logits, cfg.kd)
        result = combine([(ce_loss(S, targets), 1.0), (kd, 1.0)])
    elif recipe == "nkd":
        result = total_kd_objective(S, probs, logits, targets, 1.0, cfg.kd, on_degenerate="skip")
    elif recipe == "dkd":
        dkd = dkd_loss(probs, S, targets, cfg.dkd, on_degenerate="skip")
        result = combine([(ce_loss(S, targets), 1.0), (dkd, 1.0)])
    else:
        result = uskd_total_loss(logits, weak_logits, targets, cfg.uskd, labels=labels)
    result = result.mean()
    if not np.isfinite(result.value):
        raise NumericalError(f"non-finite {recipe} loss")
    return result


def recipe_objective(cfg, spec, params, images, targets, probs=None, labels=None, frozen_tap=None):
    """Forward pass plus the recipe loss recorded on one tape.

    ``frozen_tap`` feeds the weak head a constant feature instead of the live tap.
    """
    logits, tap, tape = forward_with_tap(spec, params, images)
    weak = None
    if cfg.recipe == "uskd":
        source = tape.constant(frozen_tap) if frozen_tap is not None else tap
        detach = not cfg.uskd.weak_grad_to_backbone
        weak = weak_forward(tape, source, params, detach=detach, mode=cfg.uskd.weak_mode)
    result = recipe_loss(
        cfg, logits.value, targets, probs, None if weak is None else weak.value, labels
    )
    pairs = [(logits, result.grad_student_logits)]
    if weak is not None:
        pairs.append((weak, result.grad_weak_logits))
    return Objective(tape, tape.loss(result.value, pairs), logits, weak, result)


def _step_record(result):
    record = {"train_loss": float(result.value)}
    record.update({c: float(result.components.get(c, 0.0)) for c in COMPONENTS})
    return record


def train_network(cfg, spec, params, data, teacher=None, run_dir=None):
    """Trains ``params`` in place for ``cfg.epochs`` epochs; returns the metrics rows.

    With ``run_dir`` every epoch's row is appended to its metrics file as soon as the
    epoch ends.
    """
    metrics_path = steps_path = None
    if run_dir is not None:
        metrics_path = os.path.join(run_dir, METRICS_FILE)
        steps_path = os.path.join(run_dir, STEPS_FILE)
    optim = cfg.optim
    state = OptimState(optim.lr, optim.momentum, optim.weight_decay)
    state.validate()
    rows = []
    if cfg.epochs == 0:
        top1 = evaluate(spec, params, data.test)
        rows.append(MetricsRow(0, cfg.recipe, cfg.seed, test_top1=top1))
        if metrics_path:
            append_metrics(metrics_path, rows[-1])
    batch_size = min(optim.batch_size, len(data.train))
    for epoch in range(cfg.epochs):
        state.lr = step_decay_lr(optim.lr, epoch, optim.lr_step, optim.lr_decay)
        started = time.perf_counter()
        totals = dict.fromkeys(("train_loss",) + COMPONENTS, 0.0)
        seen = 0
        steps = []
        for step, (images, targets) in enumerate(
            batches(data.train, BatchPlan(cfg.seed, batch_size, epoch))
        ):
            try:
                probs = teacher_probs(teacher, data, images) if teacher is not None else None
                objective = recipe_objective(cfg, spec, params, images, targets, probs)
                sgd_step(params, objective.tape.backward(objective.loss), state)
            except NumericalError as e:
                raise NumericalError(f"epoch {epoch + 1} step {step}: {e}") from e
            record = _step_record(objective.result)
            for key, value in record.items():
                totals[key] += len(targets) * value
            seen += len(targets)
            if cfg.log_steps:
                steps.append({"epoch": epoch + 1, "step": step, **record})
        wall = time.perf_counter() - started if cfg.record_wall_time else 0.0
        row = MetricsRow(
            epoch=epoch + 1,
            recipe=cfg.recipe,
            seed=cfg.seed,
            test_top1=evaluate(spec, params, data.test),
            wall_seconds=wall,
            **{key: total / seen for key, total in totals.items()},
        )
        rows.append(row)
        if metrics_path:
            append_metrics(metrics_path, row)
            if steps:
                append_steps(steps_path, steps)
        logger.info(
            "%s seed %d epoch %d/%d: loss %.4f, top-1 %.2f%%",
            cfg.recipe,
            cfg.seed,
            epoch + 1,
            cfg.epochs,
            row.train_loss,
            row.test_top1,
        )
    return rows


def train_teacher(cfg, data, path):
    """Trains the experiment's teacher with the baseline recipe and saves it at ``path``."""
    teacher_cfg = cfg.teacher_run()
    spec = teacher_cfg.student_spec
    logger.info("training teacher %s for %d epoch(s)", path, teacher_cfg.epochs)
    params = init_params(spec, cfg.seed, SEED_STREAM_TEACHER_INIT)
    rows = train_network(teacher_cfg, spec, params, data)
    checkpoint = Checkpoint(
        spec,
        params,
        data.mean,
        data.std,
        metadata={
            "recipe": "teacher",
            "seed": cfg.seed,
            "epochs": teacher_cfg.epochs,
            "test_top1": rows[-1].test_top1,
        },
    )
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    save_checkpoint(path, checkpoint)
    return checkpoint


def ensure_teacher(cfg, data):
    """Loads the teacher checkpoint, training it first when allowed."""
    path = cfg.teacher_path
    if os.path.exists(path):
        teacher = load_checkpoint(path)
    elif cfg.teacher.train_if_missing:
        teacher = train_teacher(cfg, data, path)
    else:
        raise ConfigError(f"teacher checkpoint {path} not found (set teacher.train_if_missing)")
    check_spec(teacher.spec, data.train, "teacher")
    return teacher


def run(cfg, out_dir=None):
    """Trains one experiment and leaves config, metrics and checkpoint in its run dir."""
    run_dir = out_dir or cfg.out_dir
    os.makedirs(run_dir, exist_ok=True)
    for name in (METRICS_FILE, STEPS_FILE):
        if os.path.exists(os.path.join(run_dir, name)):
            os.remove(os.path.join(run_dir, name))
    data = prepare_data(cfg.dataset)
    spec = cfg.student_spec
    check_spec(spec, data.train)
    teacher = ensure_teacher(cfg, data) if cfg.recipe in TEACHER_RECIPES else None
    save_json(os.path.join(run_dir, CONFIG_FILE), cfg.to_dict())
    params = init_params(spec, cfg.seed, SEED_STREAM_INIT)
    logger.info(
        "%s: %d parameters, %d training images", cfg.recipe, params.num_params(), len(data.train)
    )
    rows = train_network(cfg, spec, params, data, teacher, run_dir)
    path = os.path.join(run_dir, CHECKPOINT_FILE)
    metadata = {
        "recipe": cfg.recipe,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "test_top1": rows[-1].test_top1,
    }
    save_checkpoint(path, Checkpoint(spec, params, data.mean, data.std, metadata))
    return RunResult(final=rows[-1], rows=rows, checkpoint=path)


def evaluate_checkpoint(path, dataset_cfg, split="test"):
    """Top-1 of a saved network on one split, normalized with the checkpoint's stats."""
    checkpoint = load_checkpoint(path)
    subset = dataset_cfg.test_subset if split == "test" else dataset_cfg.train_subset
    dataset = subsample(load_split(dataset_cfg, split), subset, dataset_cfg.data_seed)
    check_spec(checkpoint.spec, dataset, "checkpoint")
    dataset = normalize(dataset, checkpoint.norm_mean, checkpoint.norm_std)
    return evaluate(checkpoint.spec, checkpoint.params, dataset), checkpoint
