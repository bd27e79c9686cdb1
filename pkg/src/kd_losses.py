"""Teacher-supervised distillation losses with analytic logit gradients.

Every loss works on a single sample (vectors of length C, scalar target) or on a batch
(rows of a (B, C) array, one target per row). Values come back per row; call
:meth:`LossResult.mean` for the batch-mean reduction. Teacher probabilities are
constants: no gradient is ever returned for them.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.config import (
    DEFAULT_GAMMA,
    DEFAULT_LAMBDA,
    EPS_DEGENERATE,
    LOG_FLOOR,
    NONTARGET_MODES,
    TARGET_TERMS,
    TEMPERATURE_MODES,
)
from src.errors import DegenerateTarget, UsageError
from src.fields import from_dict, require_choice, require_number, to_dict
from src.numkit import (
    as_rows,
    drop_target,
    inverse_temperature,
    nontarget_full,
    safe_log,
    softmax_stable,
    target_mask,
    temper_probs,
)

logger = logging.getLogger(__name__)


@dataclass
class KdConfig:
    """NKD hyper-parameters: non-target weight gamma and temperature lambda."""

    gamma: float = DEFAULT_GAMMA
    temperature: float = DEFAULT_LAMBDA
    temperature_mode: str = "classical"
    nontarget: str = "normalized"
    target_terms: str = "t1"

    def validate(self):
        """Raises ConfigError on an invalid weight, temperature or mode."""
        require_number("kd.gamma", self.gamma, low=0.0)
        require_number("kd.temperature", self.temperature, low=0.0, low_open=True)
        require_choice("kd.temperature_mode", self.temperature_mode, TEMPERATURE_MODES)
        require_choice("kd.nontarget", self.nontarget, NONTARGET_MODES)
        require_choice("kd.target_terms", self.target_terms, TARGET_TERMS)

    @property
    def literal(self):
        """True when probabilities are raised to the temperature itself."""
        return self.temperature_mode == "literal"

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return from_dict(cls, data, aliases={"lambda": "temperature"})


@dataclass
class DkdConfig:
    """Weights of DKD's target-class (alpha) and non-target-class (beta) terms."""

    alpha: float = 1.0
    beta: float = 8.0

    def validate(self):
        """Both weights must be non-negative."""
        require_number("dkd.alpha", self.alpha, low=0.0)
        require_number("dkd.beta", self.beta, low=0.0)

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return from_dict(cls, data, aliases={"alpha_dkd": "alpha", "beta_dkd": "beta"})


@dataclass
class LossResult:
    """Loss value (nats) with its gradient with respect to the student logits.

    ``components`` holds the unweighted named terms (``l_ori``, ``l_target``, ``l_non``,
    ``l_weak``) so that callers can log them; ``skipped`` counts rows whose non-target
    term was dropped as degenerate.
    """

    value: object
    grad_student_logits: np.ndarray
    grad_weak_logits: Optional[np.ndarray] = None
    components: dict = field(default_factory=dict)
    clamped: bool = False
    skipped: int = 0

    @property
    def is_batch(self):
        return np.ndim(self.value) > 0

    def mean(self):
        """Arithmetic-mean reduction over the batch axis (fixed summation order)."""
        if not self.is_batch:
            return self
        batch = len(self.value)
        weak = None if self.grad_weak_logits is None else self.grad_weak_logits / batch
        return LossResult(
            value=float(np.mean(self.value)),
            grad_student_logits=self.grad_student_logits / batch,
            grad_weak_logits=weak,
            components={k: float(np.mean(v)) for k, v in self.components.items()},
            clamped=self.clamped,
            skipped=self.skipped,
        )


def combine(parts):
    """Weighted sum of ``(LossResult, weight)`` pairs; components are merged as-is."""
    value = 0.0
    grad = None
    weak = None
    components = {}
    for result, weight in parts:
        value = value + weight * np.asarray(result.value)
        g = weight * result.grad_student_logits
        grad = g if grad is None else grad + g
        if result.grad_weak_logits is not None:
            w = weight * result.grad_weak_logits
            weak = w if weak is None else weak + w
        components.update(result.components)
    value = float(value) if np.ndim(value) == 0 else value
    return LossResult(
        value=value,
        grad_student_logits=grad,
        grad_weak_logits=weak,
        components=components,
        clamped=any(r.clamped for r, _ in parts),
        skipped=max((r.skipped for r, _ in parts), default=0),
    )


def _unrow(x, squeeze):
    if squeeze:
        return float(x[0]) if np.ndim(x) == 1 else x[0]
    return x


def target_terms(coef, S, targets, mode="t1"):
    """Target-class terms weighted by ``coef`` (teacher T_t or soft label P_t).

    t1 is ``-coef * log S_t``; t2 is ``-(1 - coef) * log(1 - S_t)``. Returns per-row
    values, the logit gradient, and the clamp flag.
    """
    rows = np.arange(S.shape[0])
    s_t = S[rows, targets]
    onehot = target_mask(S.shape, targets)
    value = np.zeros(S.shape[0])
    grad = np.zeros_like(S)
    clamped = False
    if mode in ("t1", "t1_t2"):
        log_s, c = safe_log(s_t)
        clamped |= c
        value += -coef * log_s
        grad += coef[:, None] * (S - onehot)
    if mode in ("t2", "t1_t2"):
        rest = 1.0 - s_t
        log_rest, c = safe_log(rest)
        clamped |= c
        value += -(1.0 - coef) * log_rest
        ratio = (1.0 - coef) * s_t / np.maximum(rest, LOG_FLOOR)
        grad += ratio[:, None] * (onehot - S)
    return value, grad, clamped


def _nontarget_ce(p_teacher, p_student, targets):
    """CE between two full-width non-target distributions (target entries are zero)."""
    log_s, clamped = safe_log(drop_target(p_student, targets))
    return -(drop_target(p_teacher, targets) * log_s).sum(axis=1), clamped


def resolve_degenerate(valid, on_degenerate, what):
    """Raises DegenerateTarget for invalid rows, or counts them when skipping."""
    bad = np.flatnonzero(~valid)
    if bad.size == 0:
        return 0
    if on_degenerate == "raise":
        raise DegenerateTarget(f"{what}: target probability within 1e-12 of 1", rows=bad)
    logger.debug("%s: skipped non-target term of %d degenerate rows", what, bad.size)
    return int(bad.size)


def ce_loss(S, t, V_t=1.0):
    """``-V_t * log S[t]``; the gradient is the softmax-CE identity ``V_t * (S - e_t)``."""
    rows, targets, squeeze = as_rows(S, t)
    coef = np.broadcast_to(np.asarray(V_t, dtype=np.float64), targets.shape).astype(np.float64)
    value, grad, clamped = target_terms(coef, rows, targets, "t1")
    return LossResult(
        value=_unrow(value, squeeze),
        grad_student_logits=_unrow(grad, squeeze),
        components={"l_ori": _unrow(value, squeeze)},
        clamped=clamped,
    )


def kd_loss(T, S):
    """Full cross-entropy ``-sum_i T_i log S_i``; gradient ``S * sum(T) - T``."""
    t_rows, _, squeeze = as_rows(T)
    s_rows, _, _ = as_rows(S)
    if t_rows.shape != s_rows.shape:
        raise UsageError(f"teacher {t_rows.shape} and student {s_rows.shape} differ in shape")
    log_s, clamped = safe_log(s_rows)
    value = -(t_rows * log_s).sum(axis=1)
    grad = s_rows * t_rows.sum(axis=1, keepdims=True) - t_rows
    return LossResult(
        value=_unrow(value, squeeze), grad_student_logits=_unrow(grad, squeeze), clamped=clamped
    )


def kd_decomposed(T, S, t):
    """Splits :func:`kd_loss` into its target and non-target sums."""
    t_rows, targets, squeeze = as_rows(T, t)
    s_rows, _, _ = as_rows(S, t)
    log_s, _ = safe_log(s_rows)
    terms = -(t_rows * log_s)
    mask = target_mask(terms.shape, targets)
    target_term = terms[mask]
    nontarget_term = np.where(mask, 0.0, terms).sum(axis=1)
    return _unrow(target_term, squeeze), _unrow(nontarget_term, squeeze)


def kd_tempered_loss(T, student_logits, cfg):
    """Classical KD: ``lambda^2 * CE(T at lambda, S at lambda)``."""
    kappa = inverse_temperature(cfg.temperature, cfg.literal)
    t_rows, _, squeeze = as_rows(temper_probs(T, cfg.temperature, cfg.literal))
    s_rows = softmax_stable(as_rows(student_logits)[0], 1.0 / kappa)
    scale = cfg.temperature**2
    inner = kd_loss(t_rows, s_rows)
    return LossResult(
        value=_unrow(scale * inner.value, squeeze),
        grad_student_logits=_unrow(scale * kappa * inner.grad_student_logits, squeeze),
        components={"l_non": _unrow(inner.value, squeeze)},
        clamped=inner.clamped,
    )


def nkd_loss(T, S, student_logits, t, cfg, on_degenerate="raise"):
    """Normalized KD loss.

    ``-T_t log S_t + gamma * lambda^2 * CE(N(T at lambda), N(S at lambda))``. The target
    term uses the untempered probabilities. With ``on_degenerate="skip"`` rows whose
    teacher or student target mass is within 1e-12 of one keep only their target term.
    """
    t_rows, targets, squeeze = as_rows(T, t)
    s_rows, _, _ = as_rows(S, t)
    z_rows, _, _ = as_rows(student_logits, t)
    coef = t_rows[np.arange(len(targets)), targets]
    value, grad, clamped = target_terms(coef, s_rows, targets, cfg.target_terms)
    components = {"l_target": value.copy(), "l_non": np.zeros_like(value)}
    skipped = 0
    if cfg.gamma != 0 and cfg.nontarget != "none":
        kappa = inverse_temperature(cfg.temperature, cfg.literal)
        s_temp = softmax_stable(z_rows, 1.0 / kappa)
        t_temp = temper_probs(t_rows, cfg.temperature, cfg.literal)
        scale = cfg.gamma * cfg.temperature**2
        if cfg.nontarget == "normalized":
            n_t, valid_t = nontarget_full(t_temp, targets)
            n_s, valid_s = nontarget_full(s_temp, targets)
            valid = valid_t & valid_s
            skipped = resolve_degenerate(valid, on_degenerate, "nkd_loss")
            non, c = _nontarget_ce(n_t, n_s, targets)
            grad_u = n_s - n_t
        else:
            mask = target_mask(t_temp.shape, targets)
            valid = np.ones(len(targets), dtype=bool)
            log_s, c = safe_log(np.where(mask, 1.0, s_temp))
            non = -(np.where(mask, 0.0, t_temp) * log_s).sum(axis=1)
            rest = 1.0 - t_temp[mask]
            grad_u = rest[:, None] * s_temp - np.where(mask, 0.0, t_temp)
        clamped |= c
        non = np.where(valid, non, 0.0)
        grad_u[~valid] = 0.0
        components["l_non"] = non
        value = value + scale * non
        grad = grad + scale * kappa * grad_u
    return LossResult(
        value=_unrow(value, squeeze),
        grad_student_logits=_unrow(grad, squeeze),
        components={k: _unrow(v, squeeze) for k, v in components.items()},
        clamped=clamped,
        skipped=skipped,
    )


def total_kd_objective(S, T, student_logits, t, V_t, cfg, on_degenerate="raise"):
    """``L_ori + L_nkd`` with summed gradients."""
    return combine(
        [(ce_loss(S, t, V_t), 1.0), (nkd_loss(T, S, student_logits, t, cfg, on_degenerate), 1.0)]
    )


def dkd_loss(T, S, t, cfg, on_degenerate="raise"):
    """Decoupled KD: ``alpha * TCKD + beta * NCKD`` on hat-renormalized distributions."""
    t_rows, targets, squeeze = as_rows(T, t)
    s_rows, _, _ = as_rows(S, t)
    rows = np.arange(len(targets))
    coef = t_rows[rows, targets]
    tckd, grad_tc, clamped = target_terms(coef, s_rows, targets, "t1_t2")
    hat_t, valid_t = nontarget_full(t_rows, targets)
    hat_s, valid_s = nontarget_full(s_rows, targets)
    valid = valid_t & valid_s & (coef > EPS_DEGENERATE) & (s_rows[rows, targets] > EPS_DEGENERATE)
    skipped = resolve_degenerate(valid, on_degenerate, "dkd_loss")
    nckd, c = _nontarget_ce(hat_t, hat_s, targets)
    grad_nc = hat_s - hat_t
    nckd = np.where(valid, nckd, 0.0)
    grad_nc[~valid] = 0.0
    value = cfg.alpha * tckd + cfg.beta * nckd
    grad = cfg.alpha * grad_tc + cfg.beta * grad_nc
    return LossResult(
        value=_unrow(value, squeeze),
        grad_student_logits=_unrow(grad, squeeze),
        components={"l_target": _unrow(tckd, squeeze), "l_non": _unrow(nckd, squeeze)},
        clamped=clamped or c,
        skipped=skipped,
    )


def t1_t2_terms(T_t, S_t):
    """``(-T_t log S_t, -(1 - T_t) log(1 - S_t))`` with clamped logs at 0 and 1."""
    log_s, _ = safe_log(S_t)
    log_rest, _ = safe_log(1.0 - np.asarray(S_t, dtype=np.float64))
    t1 = -T_t * log_s
    t2 = -(1.0 - T_t) * log_rest
    return float(t1) if np.ndim(t1) == 0 else t1, float(t2) if np.ndim(t2) == 0 else t2
