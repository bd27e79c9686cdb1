"""Finite-difference audit of a recipe's analytic gradients on a real batch."""

import dataclasses
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from src.config import (
    GRADCHECK_BATCH,
    GRADCHECK_COORDS,
    GRADCHECK_TOLERANCE,
    SEED_STREAM_GRADCHECK,
    SEED_STREAM_TEACHER_INIT,
    STATIONARITY_TOLERANCE,
    TEACHER_RECIPES,
)
from src.kd_losses import nkd_loss
from src.nets import ParamSet, forward_with_tap, init_params, weak_forward
from src.numkit import derive_rng, finite_diff_grad, relative_error, softmax_stable
from src.persistence import Checkpoint, load_checkpoint
from src.tape import TapeGraph
from src.training import check_spec, prepare_data, recipe_loss, recipe_objective, teacher_probs
from src.uskd_labels import build_soft_labels

logger = logging.getLogger(__name__)


@dataclass
class GradcheckReport:
    recipe: str
    coords: int
    param_error: float
    logit_error: float
    checks: dict = field(default_factory=dict)
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self):
        extra = all(value <= limit for value, limit in self.checks.values())
        return self.param_error <= self.tolerance and self.logit_error <= self.tolerance and extra

    def format(self):
        lines = [
            f"gradcheck {self.recipe}: {self.coords} coordinates per block",
            f"  parameters  max rel err {self.param_error:.3e} (limit {self.tolerance:.0e})",
            f"  logits      max rel err {self.logit_error:.3e} (limit {self.tolerance:.0e})",
        ]
        for name, (value, limit) in self.checks.items():
            lines.append(f"  {name:<11} {value:.3e} (limit {limit:.0e})")
        lines.append("PASSED" if self.passed else "FAILED")
        return "\n".join(lines)


def _teacher(cfg, data):
    path = cfg.teacher_path
    if os.path.exists(path):
        return load_checkpoint(path)
    logger.info("no teacher at %s; using a randomly initialized teacher", path)
    spec = cfg.teacher.model
    params = init_params(spec, cfg.seed, SEED_STREAM_TEACHER_INIT)
    return Checkpoint(spec, params, data.mean, data.std)


def nkd_stationarity(kd_cfg, logits, targets):
    """Largest non-target gradient norm of NKD's non-target term when N(T) equals N(S).

    The teacher is the student with its target logits raised by one, which leaves the
    renormalized non-target distribution unchanged.
    """
    rows = np.arange(len(targets))
    shifted = logits.copy()
    shifted[rows, targets] += 1.0
    T = softmax_stable(shifted)
    S = softmax_stable(logits)
    full = nkd_loss(T, S, logits, targets, kd_cfg, on_degenerate="skip")
    target_only = nkd_loss(T, S, logits, targets, dataclasses.replace(kd_cfg, gamma=0.0))
    grad = full.grad_student_logits - target_only.grad_student_logits
    grad[rows, targets] = 0.0
    return float(np.max(np.linalg.norm(grad, axis=1)))


def _param_error(loss_of, grads, params, picks):
    names = list(params)
    offsets = np.cumsum([0] + [params[n].size for n in names])
    analytic, numeric = [], []
    for i, name in enumerate(names):
        local = [int(p - offsets[i]) for p in picks if offsets[i] <= p < offsets[i + 1]]
        if not local:
            continue

        def f(array, name=name):
            trial = ParamSet(params.data)
            trial[name] = array
            return loss_of(trial)

        numeric.append(finite_diff_grad(f, params[name], indices=local))
        analytic.append(grads[name].reshape(-1)[local])
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


def gradcheck(cfg, coords=GRADCHECK_COORDS, batch=GRADCHECK_BATCH):
    """Compares tape gradients with central differences on sampled coordinates.

    Detached quantities (uskd soft labels and the weak head's input feature) are
    frozen at their initial values for both sides of the comparison.
    """
    data = prepare_data(cfg.dataset)
    spec = cfg.student_spec
    check_spec(spec, data.train)
    params = init_params(spec, cfg.seed)
    rng = derive_rng(cfg.seed, SEED_STREAM_GRADCHECK)
    idx = np.sort(rng.choice(len(data.train), size=min(batch, len(data.train)), replace=False))
    images, targets = data.train.images[idx], data.train.labels[idx]
    probs = None
    if cfg.recipe in TEACHER_RECIPES:
        probs = teacher_probs(_teacher(cfg, data), data, images)

    labels = frozen_tap = None
    if cfg.recipe == "uskd":
        logits0, tap0, _ = forward_with_tap(spec, params, images)
        tape = TapeGraph()
        weak0 = weak_forward(tape, tape.constant(tap0.value), params, mode=cfg.uskd.weak_mode)
        S0, W0 = softmax_stable(logits0.value), softmax_stable(weak0.value)
        labels = build_soft_labels(S0, W0, targets, cfg.uskd)
        if not cfg.uskd.weak_grad_to_backbone:
            frozen_tap = tap0.value

    objective = recipe_objective(cfg, spec, params, images, targets, probs, labels, frozen_tap)

    def loss_of(trial):
        again = recipe_objective(cfg, spec, trial, images, targets, probs, labels, frozen_tap)
        return again.result.value

    grads = objective.tape.backward(objective.loss)
    total = params.num_params()
    picks = np.sort(rng.choice(total, size=min(coords, total), replace=False))
    param_error = _param_error(loss_of, grads, params, picks)

    z0 = objective.logits.value
    weak_value = None if objective.weak is None else objective.weak.value
    logit_picks = np.sort(rng.choice(z0.size, size=min(coords, z0.size), replace=False))
    numeric = finite_diff_grad(
        lambda z: recipe_loss(cfg, z, targets, probs, weak_value, labels).value,
        z0,
        indices=logit_picks,
    )
    analytic = objective.result.grad_student_logits.reshape(-1)[logit_picks]
    logit_error = relative_error(analytic, numeric)

    checks = {}
    if cfg.recipe == "nkd" and cfg.kd.nontarget == "normalized":
        checks["stationary"] = (nkd_stationarity(cfg.kd, z0, targets), STATIONARITY_TOLERANCE)
    if cfg.recipe == "uskd" and not cfg.uskd.weak_grad_to_backbone:
        live = recipe_objective(cfg, spec, params, images, targets, probs, labels)
        weak_only = live.tape.loss(
            live.result.components["l_weak"], [(live.weak, live.result.grad_weak_logits)]
        )
        grads = live.tape.backward(weak_only)
        leak = max(float(np.max(np.abs(grads[n]))) for n in params.backbone_names())
        checks["weak_leak"] = (leak, 0.0)

    report = GradcheckReport(cfg.recipe, len(picks), param_error, logit_error, checks)
    logger.info("gradcheck %s: %s", cfg.recipe, "passed" if report.passed else "failed")
    return report
