"""Teacher-free customized soft labels and the self-distillation objective.

The soft target label P_t comes from the student's own (squared, batch-shifted) target
probability; the soft non-target labels are Zipf values placed by the rank of a fused
weak/final logit. Both are plain arrays: they never receive a gradient.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from src.config import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_LS_EPSILON,
    DEFAULT_MU,
    EPS_DEGENERATE,
    RANK_VARIANTS,
    SMOOTH_VARIANTS,
    TARGET_TERMS,
    WEAK_MODES,
)
from src.data import smooth_labels
from src.errors import DegenerateTarget, UsageError
from src.fields import from_dict, require_choice, require_number, to_dict
from src.kd_losses import LossResult, ce_loss, combine, resolve_degenerate, target_terms
from src.numkit import as_rows, drop_target, nontarget_full, safe_log, softmax_stable, target_mask

logger = logging.getLogger(__name__)


@dataclass
class UskdConfig:
    """USKD weights (alpha, beta, mu) and the ablation switches."""

    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    mu: float = DEFAULT_MU
    smooth_variant: str = "sq_mean_shift"
    rank_variant: str = "combined_normalized"
    ls_epsilon: float = DEFAULT_LS_EPSILON
    target_terms: str = "t1"
    weak_mode: str = "cnn_gap"
    weak_grad_to_backbone: bool = False

    def validate(self):
        """Raises ConfigError on an invalid weight or variant."""
        require_number("uskd.alpha", self.alpha, low=0.0)
        require_number("uskd.beta", self.beta, low=0.0)
        require_number("uskd.mu", self.mu, low=0.0, high=1.0, low_open=True)
        require_number("uskd.ls_epsilon", self.ls_epsilon, low=0.0, high=1.0, high_open=True)
        require_choice("uskd.smooth_variant", self.smooth_variant, SMOOTH_VARIANTS)
        require_choice("uskd.rank_variant", self.rank_variant, RANK_VARIANTS)
        require_choice("uskd.target_terms", self.target_terms, TARGET_TERMS)
        require_choice("uskd.weak_mode", self.weak_mode, WEAK_MODES)
        require_choice("uskd.weak_grad_to_backbone", self.weak_grad_to_backbone, [True, False])

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return from_dict(cls, data)


@dataclass
class SoftLabelSet:
    """Customized labels for a batch.

    ``z_nontarget`` holds the assigned Zipf value of every non-target class in class
    order (the target column removed); ``rank_order`` lists those classes from highest
    to lowest fused score. ``valid`` is False for rows whose non-target labels are
    undefined because a distribution in use put all its mass on the target.
    """

    p_target: np.ndarray
    z_nontarget: np.ndarray
    rank_order: np.ndarray
    valid: np.ndarray


@dataclass
class WeakHead:
    """Linear layer on the tapped feature: ``weight`` (C, D), ``bias`` (C,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise UsageError(f"weak head shapes {self.weight.shape} / {self.bias.shape} mismatch")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise UsageError("weak head parameters must be finite")


def soft_target_label(S_t_batch, V_t_batch, variant="sq_mean_shift"):
    """Soft target label P_t for every sample of a batch.

    ``sq_mean_shift`` is ``S_t^2 + V_t - mean(S_t^2)``; the other variants drop the
    square. ``teacher_passthrough`` expects an external model's S_t and returns it.
    """
    s = np.asarray(S_t_batch, dtype=np.float64).reshape(-1)
    v = np.broadcast_to(np.asarray(V_t_batch, dtype=np.float64), s.shape)
    if s.size == 0:
        raise UsageError("soft_target_label needs a batch of at least one sample")
    require_choice("smooth_variant", variant, SMOOTH_VARIANTS)
    if variant == "sq_mean_shift":
        sq = s * s
        return sq + v - sq.mean()
    if variant == "mean_shift":
        return s + v - s.mean()
    if variant == "softmax_rescale":
        e = np.exp(s - s.max())
        return e / e.sum() * v.sum()
    if variant == "sqrt_min_shift":
        return np.sqrt(s - s.min())
    if variant == "max_div":
        return s / s.max()
    if variant == "mean_div":
        return s / s.mean()
    return s.copy()


def target_loss(P_t, S, t, terms="t1"):
    """``-P_t log S_t``; P_t is a constant so the gradient runs through S_t only."""
    rows, targets, squeeze = as_rows(S, t)
    coef = np.broadcast_to(np.asarray(P_t, dtype=np.float64), targets.shape).astype(np.float64)
    value, grad, clamped = target_terms(coef, rows, targets, terms)
    value = float(value[0]) if squeeze else value
    return LossResult(
        value=value,
        grad_student_logits=grad[0] if squeeze else grad,
        components={"l_target": value},
        clamped=clamped,
    )


def weak_logit(feature, head, mode="cnn_gap"):
    """Weak-logit probabilities ``softmax(FC(GAP(F)))`` or ``softmax(FC(F))`` for tokens.

    Accepts one feature (D, H, W) / (D,) or a batch with a leading axis.
    """
    require_choice("weak_mode", mode, WEAK_MODES)
    f = np.asarray(feature, dtype=np.float64)
    if mode == "cnn_gap":
        if f.ndim not in (3, 4):
            raise UsageError(f"cnn_gap expects (D, H, W) features, got shape {f.shape}")
        pooled = f.mean(axis=(-2, -1))
    else:
        if f.ndim not in (1, 2):
            raise UsageError(f"vit_token expects a (D,) token, got shape {f.shape}")
        pooled = f
    if pooled.shape[-1] != head.weight.shape[1]:
        raise UsageError(f"feature width {pooled.shape[-1]} != head width {head.weight.shape[1]}")
    return softmax_stable(pooled @ head.weight.T + head.bias)


def weak_loss(W, smoothed_labels, mu):
    """``mu * CE(smoothed_labels, W)``; the gradient goes to the weak-head logits only."""
    w_rows, _, squeeze = as_rows(W)
    v_rows, _, _ = as_rows(smoothed_labels)
    if w_rows.shape != v_rows.shape:
        raise UsageError(f"weak logit {w_rows.shape} and labels {v_rows.shape} differ in shape")
    log_w, clamped = safe_log(w_rows)
    value = -mu * (v_rows * log_w).sum(axis=1)
    grad = mu * (w_rows * v_rows.sum(axis=1, keepdims=True) - v_rows)
    value = float(value[0]) if squeeze else value
    return LossResult(
        value=value,
        grad_student_logits=np.zeros_like(grad[0] if squeeze else grad),
        grad_weak_logits=grad[0] if squeeze else grad,
        components={"l_weak": value},
        clamped=clamped,
    )


_RANK_SOURCES = {
    "combined_normalized": (0, 1),
    "combined_raw": (0, 1),
    "weak_only": (0,),
    "final_only": (1,),
}


def _rank_rows(W, S, targets, variant, dtype=np.float64):
    w = np.asarray(W, dtype=dtype)
    s = np.asarray(S, dtype=dtype)
    mask = target_mask(w.shape, targets)
    valid = np.ones(len(targets), dtype=bool)
    rests = []
    for index in _RANK_SOURCES[variant]:
        probs = (w, s)[index]
        rest = 1 - probs[mask]
        valid &= rest > EPS_DEGENERATE
        rests.append((probs, rest))
    if variant == "combined_normalized":
        fused = np.zeros_like(w)
        for probs, rest in rests:
            ok = rest > EPS_DEGENERATE
            fused += np.where(mask, 0, probs) / np.where(ok, rest, 1)[:, None]
    elif variant == "combined_raw":
        fused = w + s
    elif variant == "weak_only":
        fused = w
    else:
        fused = s
    classes = np.broadcast_to(np.arange(w.shape[1]), w.shape)
    scores = drop_target(np.asarray(fused, dtype=dtype), targets)
    others = drop_target(classes, targets)
    order = np.argsort(-scores, axis=1, kind="stable")
    return np.take_along_axis(others, order, axis=1).astype(np.int64), valid


def nontarget_rank(W, S, t, variant="combined_normalized", dtype=np.float64):
    """Non-target classes sorted by descending fused score, ties by ascending index.

    ``combined_normalized`` fuses ``W_i/(1-W_t) + S_i/(1-S_t)``; ``combined_raw`` adds
    the raw probabilities; ``weak_only`` and ``final_only`` use one distribution. Every
    distribution the variant ranks on must leave mass off the target (DegenerateTarget).
    """
    require_choice("rank_variant", variant, RANK_VARIANTS)
    w_rows, targets, squeeze = as_rows(W, t)
    s_rows, _, _ = as_rows(S, t)
    order, valid = _rank_rows(w_rows, s_rows, targets, variant, dtype)
    if not np.all(valid):
        raise DegenerateTarget("nontarget_rank: target probability within 1e-12 of 1")
    return order[0] if squeeze else order


def zipf_distribution(n_ranks):
    """``Z_k = (1/k) / H_n`` for ranks 1..n."""
    if isinstance(n_ranks, bool) or int(n_ranks) != n_ranks or n_ranks < 1:
        raise UsageError(f"zipf_distribution needs a positive rank count, got {n_ranks!r}")
    inv = 1.0 / np.arange(1, int(n_ranks) + 1, dtype=np.float64)
    return inv / math.fsum(inv)


def assign_zipf(rank_order, targets, num_classes):
    """Places Zipf values on the ranked classes; returns them in non-target class order."""
    order = np.asarray(rank_order, dtype=np.int64)
    squeeze = order.ndim == 1
    order = np.atleast_2d(order)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if order.shape != (len(targets), num_classes - 1):
        raise UsageError(f"rank order {order.shape} does not cover {num_classes - 1} classes")
    zipf = zipf_distribution(num_classes - 1)
    full = np.zeros((order.shape[0], num_classes))
    np.put_along_axis(full, order, np.broadcast_to(zipf, order.shape), axis=1)
    out = drop_target(full, targets)
    return out[0] if squeeze else out


def uskd_nontarget_loss(Z_assigned, S, t, on_degenerate="raise"):
    """``CE(N(Z), N(S))`` over the non-target classes; Z is a constant."""
    s_rows, targets, squeeze = as_rows(S, t)
    z_rows, _, _ = as_rows(Z_assigned)
    if z_rows.shape != (s_rows.shape[0], s_rows.shape[1] - 1):
        raise UsageError(f"assigned labels {z_rows.shape} do not cover C-1 classes")
    keep = ~target_mask(s_rows.shape, targets)
    n_z = np.zeros_like(s_rows)
    n_z[keep] = (z_rows / z_rows.sum(axis=1, keepdims=True)).reshape(-1)
    n_s, valid = nontarget_full(s_rows, targets)
    skipped = resolve_degenerate(valid, on_degenerate, "uskd_nontarget_loss")
    log_s, clamped = safe_log(drop_target(n_s, targets))
    value = -(drop_target(n_z, targets) * log_s).sum(axis=1)
    grad = n_s - n_z
    value = np.where(valid, value, 0.0)
    grad[~valid] = 0.0
    value = float(value[0]) if squeeze else value
    return LossResult(
        value=value,
        grad_student_logits=grad[0] if squeeze else grad,
        components={"l_non": value},
        clamped=clamped,
        skipped=skipped,
    )


def build_soft_labels(S, W, targets, cfg, teacher_target=None, V_t=1.0):
    """Synthesizes the customized labels of a batch from detached probabilities."""
    s_rows, targets, _ = as_rows(S, targets)
    w_rows, _, _ = as_rows(W, targets)
    rows = np.arange(len(targets))
    if cfg.smooth_variant == "teacher_passthrough":
        if teacher_target is None:
            raise UsageError("teacher_passthrough smoothing needs the teacher's target probability")
        source = np.asarray(teacher_target, dtype=np.float64).reshape(-1)
    else:
        source = s_rows[rows, targets]
    p_target = soft_target_label(source, V_t, cfg.smooth_variant)
    order, valid = _rank_rows(w_rows, s_rows, targets, cfg.rank_variant)
    _, valid_s = nontarget_full(s_rows, targets)
    z = assign_zipf(order, targets, s_rows.shape[1])
    return SoftLabelSet(p_target=p_target, z_nontarget=z, rank_order=order, valid=valid & valid_s)


def uskd_total_loss(student_logits, weak_logits, targets, cfg, labels=None, teacher_target=None):
    """``L_ori + alpha * L_target + beta * L_non + L_weak`` per sample.

    Student-logit gradients collect the first three terms; ``grad_weak_logits`` holds
    L_weak's gradient alone. Pass ``labels`` to reuse a prebuilt (frozen) label set.
    Rows with undefined non-target labels keep every other term.
    """
    z_rows, targets, squeeze = as_rows(student_logits, targets)
    w_logits, _, _ = as_rows(weak_logits, targets)
    S = softmax_stable(z_rows)
    W = softmax_stable(w_logits)
    if labels is None:
        labels = build_soft_labels(S, W, targets, cfg, teacher_target)
    smoothed = smooth_labels(targets, S.shape[1], cfg.ls_epsilon)
    non = uskd_nontarget_loss(labels.z_nontarget, S, targets, on_degenerate="skip")
    non.value = np.where(labels.valid, non.value, 0.0)
    non.grad_student_logits[~labels.valid] = 0.0
    non.components["l_non"] = non.value
    non.skipped = int(np.count_nonzero(~labels.valid))
    result = combine(
        [
            (ce_loss(S, targets, 1.0), 1.0),
            (target_loss(labels.p_target, S, targets, cfg.target_terms), cfg.alpha),
            (non, cfg.beta),
            (weak_loss(W, smoothed, cfg.mu), 1.0),
        ]
    )
    if squeeze:
        result = result.mean()
        result.grad_student_logits = result.grad_student_logits[0]
        result.grad_weak_logits = result.grad_weak_logits[0]
    return result
