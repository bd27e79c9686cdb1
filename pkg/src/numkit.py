"""Numeric primitives: stable softmax, non-target renormalization, finite differences."""

import logging

import numpy as np

from src.config import EPS_DEGENERATE, FINITE_DIFF_STEP, GRADCHECK_REL_FLOOR, LOG_FLOOR
from src.errors import DegenerateTarget, NumericalError, UsageError

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 64) - 1


def as_rows(x, t=None):
    """Promotes a vector (and scalar target) to a one-row batch.

    Returns ``(rows, targets, squeeze)`` where ``squeeze`` tells the caller to drop the
    batch axis again on the way out.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    rows = x[None, :] if squeeze else x
    if rows.ndim != 2:
        raise UsageError(f"expected a vector or a batch of vectors, got shape {x.shape}")
    if t is None:
        return rows, None, squeeze
    targets = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if targets.shape != (rows.shape[0],):
        raise UsageError(f"{targets.shape[0]} targets for {rows.shape[0]} rows")
    if np.any(targets < 0) or np.any(targets >= rows.shape[1]):
        raise UsageError(f"target index out of range for {rows.shape[1]} classes")
    return rows, targets, squeeze


def target_mask(shape, targets):
    """Boolean (B, C) mask that is True at each row's target column."""
    mask = np.zeros(shape, dtype=bool)
    mask[np.arange(shape[0]), targets] = True
    return mask


def drop_target(rows, targets):
    """Removes the target column from every row, keeping class order."""
    keep = ~target_mask(rows.shape, targets)
    return rows[keep].reshape(rows.shape[0], rows.shape[1] - 1)


def check_finite(x, what="input"):
    """Raises NumericalError if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")


def softmax_stable(z, temperature=1.0):
    """Softmax of ``z / temperature`` along the last axis, max-shifted."""
    if not temperature > 0 or not np.isfinite(temperature):
        raise UsageError(f"temperature must be a positive finite number, got {temperature}")
    z = np.asarray(z, dtype=np.float64)
    check_finite(z, "logits")
    scaled = z / temperature
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_stable(z, temperature=1.0):
    """Log of :func:`softmax_stable`, computed without forming tiny probabilities."""
    z = np.asarray(z, dtype=np.float64)
    check_finite(z, "logits")
    scaled = z / temperature
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def temper_probs(p, temperature=1.0, literal=False):
    """Re-tempers a probability vector.

    Classical reading: ``p ** (1/temperature)`` renormalized, identical to dividing the
    underlying logits by the temperature. Literal reading: ``p ** temperature``.
    """
    p = np.asarray(p, dtype=np.float64)
    if temperature == 1.0:
        return p
    power = temperature if literal else 1.0 / temperature
    q = np.power(p, power)
    return q / q.sum(axis=-1, keepdims=True)


def inverse_temperature(temperature, literal=False):
    """Factor applied to logits before softmax under each temperature reading."""
    return temperature if literal else 1.0 / temperature


def nontarget_full(p, targets):
    """Row-wise N(p) kept at full width with a zero at the target.

    Returns ``(normalized, valid)``; rows whose target mass is within ``EPS_DEGENERATE``
    of one are marked invalid and left as zeros.
    """
    rows, targets, _ = as_rows(p, targets)
    mask = target_mask(rows.shape, targets)
    rest = 1.0 - rows[mask]
    valid = rest > EPS_DEGENERATE
    out = np.where(mask, 0.0, rows)
    out[valid] = out[valid] / rest[valid, None]
    out[~valid] = 0.0
    return out, valid


def nontarget_renormalize(p, t):
    """N(p): non-target entries divided by ``1 - p[t]``, over C-1 classes."""
    rows, targets, squeeze = as_rows(p, t)
    full, valid = nontarget_full(rows, targets)
    if not np.all(valid):
        raise DegenerateTarget(rows=np.flatnonzero(~valid))
    out = drop_target(full, targets)
    return out[0] if squeeze else out


def safe_log(p):
    """Elementwise log with a floor at ``LOG_FLOOR``; also reports whether it clamped."""
    p = np.asarray(p, dtype=np.float64)
    clamped = bool(np.any(p < LOG_FLOOR))
    if clamped:
        logger.warning("probability below %.0e clamped before log", LOG_FLOOR)
    return np.log(np.maximum(p, LOG_FLOOR)), clamped


def finite_diff_grad(f, x, h=FINITE_DIFF_STEP, indices=None):
    """Central-difference gradient of scalar ``f`` at ``x``.

    With ``indices`` (flat positions) only those coordinates are evaluated and a 1-D
    array in the same order is returned; otherwise the result has the shape of ``x``.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    out = []
    for i in coords:
        saved = flat[i]
        flat[i] = saved + h
        up = float(f(x))
        flat[i] = saved - h
        down = float(f(x))
        flat[i] = saved
        out.append((up - down) / (2.0 * h))
    grad = np.asarray(out, dtype=np.float64)
    return grad.reshape(x.shape) if indices is None else grad


def relative_error(analytic, numeric, floor=GRADCHECK_REL_FLOOR):
    """Max over coordinates of ``|a - n| / max(floor, |a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def derive_rng(master_seed, stream, *extra):
    """Generator for one named stream of the master seed.

    The stream seed is ``SeedSequence([master_seed mod 2**64, stream, *extra])``, so
    init, shuffle and subsample draws never share state.
    """
    entropy = [int(master_seed) & _SEED_MASK, int(stream)] + [int(e) & _SEED_MASK for e in extra]
    return np.random.default_rng(np.random.SeedSequence(entropy))
