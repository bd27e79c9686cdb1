"""Tiny teacher/student networks with a feature tap, plus SGD with momentum."""

import hashlib
import json
import logging
from collections import UserDict
from dataclasses import dataclass, field

import numpy as np

from src.config import (
    DEFAULT_LR,
    DEFAULT_MOMENTUM,
    DEFAULT_WEIGHT_DECAY,
    NET_KINDS,
    POOL_SIZE,
    SEED_STREAM_INIT,
)
from src.errors import ConfigError, NumericalError, UsageError
from src.fields import from_dict, require_choice, require_int, require_number, to_dict
from src.numkit import derive_rng
from src.tape import TapeGraph

logger = logging.getLogger(__name__)

KERNEL_SIZE = 3


@dataclass
class NetSpec:
    """Architecture description.

    ``widths`` are hidden widths for ``mlp`` and per-stage channels for ``cnn2stage``.
    ``tap_stage`` selects the feature F: 0 is the input, k the output of stage k, and
    -1 the deepest stage.
    """

    kind: str = "cnn2stage"
    widths: tuple = (8, 16)
    num_classes: int = 10
    input_shape: tuple = (1, 28, 28)
    tap_stage: int = -1
    weak_head: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.input_shape = tuple(int(d) for d in self.input_shape)

    def validate(self):
        """Raises ConfigError for an unknown kind, bad shapes or widths, or a missing tap."""
        require_choice("model.kind", self.kind, NET_KINDS)
        require_int("model.num_classes", self.num_classes, low=2)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"model.input_shape must be (C, H, W), got {self.input_shape}")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"model.widths must be positive, got {self.widths}")
        if self.kind == "cnn2stage" and len(self.widths) != 2:
            raise ConfigError("cnn2stage needs exactly two stage widths")
        if not 0 <= self.tap <= len(self.widths):
            raise ConfigError(f"tap_stage {self.tap_stage} does not exist")

    @property
    def tap(self):
        return len(self.widths) if self.tap_stage == -1 else self.tap_stage

    @property
    def feature_width(self):
        """Width D of the tapped feature (channels for the CNN)."""
        if self.tap > 0:
            return self.widths[self.tap - 1]
        if self.kind == "cnn2stage":
            return self.input_shape[0]
        return int(np.prod(self.input_shape))

    def spec_hash(self):
        """SHA-256 of the canonical JSON form."""
        canonical = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(canonical).digest()

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return from_dict(cls, data)


def param_layout(spec):
    """Ordered ``(name, shape, fan_in)`` triples of every parameter."""
    layout = []
    if spec.kind == "mlp":
        width = int(np.prod(spec.input_shape))
        for i, out in enumerate(spec.widths):
            layout += [(f"fc{i}.weight", (out, width), width), (f"fc{i}.bias", (out,), width)]
            width = out
    else:
        width = spec.input_shape[0]
        for i, out in enumerate(spec.widths):
            fan_in = width * KERNEL_SIZE * KERNEL_SIZE
            layout += [
                (f"conv{i}.weight", (out, width, KERNEL_SIZE, KERNEL_SIZE), fan_in),
                (f"conv{i}.bias", (out,), fan_in),
            ]
            width = out
    c = spec.num_classes
    layout += [("out.weight", (c, width), width), ("out.bias", (c,), width)]
    if spec.weak_head:
        d = spec.feature_width
        layout += [("weak.weight", (c, d), d), ("weak.bias", (c,), d)]
    return layout


class ParamSet(UserDict):
    """Named parameter arrays in layout order."""

    def add(self, name, array):
        """Adds or replaces one parameter."""
        self.data[name] = np.asarray(array, dtype=np.float64)

    def copy(self):
        return ParamSet({name: array.copy() for name, array in self.data.items()})

    def num_params(self):
        return int(sum(array.size for array in self.data.values()))

    def backbone_names(self):
        """Every parameter except the weak head."""
        return [name for name in self.data if not name.startswith("weak.")]

    def to_dict(self):
        return {
            name: {"shape": list(array.shape), "values": array.reshape(-1).tolist()}
            for name, array in self.data.items()
        }

    @classmethod
    def from_dict(cls, data):
        params = cls()
        for name, entry in data.items():
            array = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            if not np.all(np.isfinite(array)):
                raise ConfigError(f"parameter {name} holds non-finite values")
            params.add(name, array)
        return params


@dataclass
class OptimState:
    """SGD hyper-parameters and one momentum buffer per parameter."""

    lr: float = DEFAULT_LR
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    buffers: dict = field(default_factory=dict)

    def validate(self):
        """Raises ConfigError on an out-of-range optimizer setting."""
        require_number("optim.lr", self.lr, low=0.0, low_open=True)
        require_number("optim.momentum", self.momentum, low=0.0, high=1.0, high_open=True)
        require_number("optim.weight_decay", self.weight_decay, low=0.0)


def init_params(spec, seed, stream=SEED_STREAM_INIT):
    """Fan-in scaled uniform init ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; bit-reproducible."""
    spec.validate()
    rng = derive_rng(seed, stream)
    params = ParamSet()
    for name, shape, fan_in in param_layout(spec):
        bound = 1.0 / np.sqrt(fan_in)
        params.add(name, rng.uniform(-bound, bound, size=shape))
    return params


def _check_input(spec, images):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or tuple(images.shape[1:]) != spec.input_shape:
        raise UsageError(f"input batch {images.shape} does not match {spec.input_shape}")
    return images


def forward_with_tap(spec, params, images, tape=None):
    """Records the forward pass; returns ``(logits, tap_feature, tape)`` nodes and tape."""
    images = _check_input(spec, images)
    tape = TapeGraph() if tape is None else tape

    def var(name):
        return tape.variable(params[name], name)

    h = tape.constant(images)
    if spec.kind == "mlp":
        h = tape.flatten(h)
    tap = h
    for i in range(len(spec.widths)):
        if spec.kind == "mlp":
            h = tape.relu(tape.affine(h, var(f"fc{i}.weight"), var(f"fc{i}.bias")))
        else:
            conv = tape.conv2d(h, var(f"conv{i}.weight"), var(f"conv{i}.bias"))
            h = tape.max_pool(tape.relu(conv), POOL_SIZE)
        if i + 1 == spec.tap:
            tap = h
    if spec.kind == "cnn2stage":
        h = tape.global_avg_pool(h)
    logits = tape.affine(h, var("out.weight"), var("out.bias"))
    return logits, tap, tape


def weak_forward(tape, tap, params, detach=True, mode="cnn_gap"):
    """Weak-head logits ``FC(GAP(F))`` (or ``FC(F)`` for token features) on the tape.

    With ``detach`` the head reads F through a stop-gradient, so L_weak trains the
    head alone.
    """
    if "weak.weight" not in params:
        raise UsageError("network was built without a weak head")
    source = tape.stop_gradient(tap) if detach else tap
    if mode == "cnn_gap":
        if source.value.ndim != 4:
            raise UsageError(f"cnn_gap weak head needs a spatial feature, got {source.shape}")
        source = tape.global_avg_pool(source)
    elif source.value.ndim != 2:
        raise UsageError(f"vit_token weak head needs a flat feature, got {source.shape}")
    weight = tape.variable(params["weak.weight"], "weak.weight")
    bias = tape.variable(params["weak.bias"], "weak.bias")
    return tape.affine(source, weight, bias)


def evaluate_logits(spec, params, images, chunk=512):
    """Final logits for a whole image array, computed in chunks."""
    out = []
    for start in range(0, len(images), chunk):
        logits, _, _ = forward_with_tap(spec, params, images[start : start + chunk])
        out.append(logits.value)
    return np.concatenate(out)


def sgd_step(params, grads, state):
    """``v <- m*v + g + wd*p``, ``p <- p - lr*v``; refuses non-finite gradients.

    Updates ``params`` and ``state`` in place and returns both.
    """
    for name in params:
        g = grads.get(name)
        if g is None or g.shape != params[name].shape:
            raise UsageError(f"gradient for {name} missing or misshapen")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}; step aborted")
    for name, p in params.items():
        v = state.buffers.get(name)
        v = np.zeros_like(p) if v is None else v
        v = state.momentum * v + grads[name] + state.weight_decay * p
        state.buffers[name] = v
        params[name] = p - state.lr * v
    return params, state


def step_decay_lr(base_lr, epoch, step, decay):
    """Learning rate for ``epoch`` (0-based) under a step-decay schedule; step 0 disables."""
    if step <= 0:
        return base_lr
    return base_lr * decay ** (epoch // step)
