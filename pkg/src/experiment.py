"""Experiment configuration: one JSON document plus ``--set`` overrides."""

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional

from src.config import (
    DATASET_FORMATS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_LR,
    DEFAULT_LR_DECAY,
    DEFAULT_LR_STEP,
    DEFAULT_LS_EPSILON,
    DEFAULT_MOMENTUM,
    DEFAULT_WEIGHT_DECAY,
    RECIPES,
    TEACHER_RECIPES,
)
from src.errors import ConfigError
from src.fields import from_dict, require_choice, require_int, require_number, to_dict
from src.kd_losses import DkdConfig, KdConfig
from src.nets import NetSpec
from src.persistence import load_json
from src.uskd_labels import UskdConfig

logger = logging.getLogger(__name__)


@dataclass
class DatasetConfig:
    """Where the train/test splits come from.

    ``idx`` reads ``train_images``/``train_labels`` (and the test pair); ``cifar`` reads
    the record files listed in ``train_files``/``test_files``; ``synthetic`` generates
    prototype images from ``data_seed``.
    """

    format: str = "synthetic"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_files: list = field(default_factory=list)
    test_files: list = field(default_factory=list)
    num_classes: int = 10
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    data_seed: int = 0
    synthetic_train: int = 600
    synthetic_test: int = 200
    image_shape: tuple = (1, 8, 8)
    noise: float = 0.35
    normalize: bool = True

    def validate(self):
        """Checks the format and the fields that format needs."""
        require_choice("dataset.format", self.format, DATASET_FORMATS)
        require_int("dataset.num_classes", self.num_classes, low=2)
        require_int("dataset.data_seed", self.data_seed)
        for name in ("train_subset", "test_subset"):
            if getattr(self, name) is not None:
                require_int(f"dataset.{name}", getattr(self, name), low=1)
        if self.format == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self, name):
                    raise ConfigError(f"idx datasets need dataset.{name}")
        elif self.format == "cifar":
            if not self.train_files or not self.test_files:
                raise ConfigError("cifar datasets need dataset.train_files and dataset.test_files")
        else:
            require_int("dataset.synthetic_train", self.synthetic_train, low=1)
            require_int("dataset.synthetic_test", self.synthetic_test, low=1)
            require_number("dataset.noise", self.noise, low=0.0)


@dataclass
class OptimConfig:
    """SGD settings shared by student and teacher training."""

    lr: float = DEFAULT_LR
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    lr_step: int = DEFAULT_LR_STEP
    lr_decay: float = DEFAULT_LR_DECAY
    batch_size: int = DEFAULT_BATCH_SIZE

    def validate(self):
        """Raises ConfigError on an out-of-range optimizer setting."""
        require_number("optim.lr", self.lr, low=0.0, low_open=True)
        require_number("optim.momentum", self.momentum, low=0.0, high=1.0, high_open=True)
        require_number("optim.weight_decay", self.weight_decay, low=0.0)
        require_int("optim.lr_step", self.lr_step, low=0)
        require_number("optim.lr_decay", self.lr_decay, low=0.0, high=1.0, low_open=True)
        require_int("optim.batch_size", self.batch_size, low=1)


@dataclass
class TeacherConfig:
    """Teacher network and where its checkpoint lives (``{seed}`` is substituted)."""

    model: NetSpec = field(default_factory=lambda: NetSpec(widths=(16, 32)))
    checkpoint: str = ""
    train_if_missing: bool = False
    epochs: int = 10

    def validate(self):
        """Checks the teacher architecture and epoch count."""
        self.model.validate()
        require_int("teacher.epochs", self.epochs, low=0)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        if "model" in data:
            data["model"] = NetSpec.from_dict(data["model"])
        return from_dict(cls, data)


@dataclass
class ExperimentConfig:
    """Everything one training run needs; ``seed`` is mandatory."""

    recipe: str
    seed: int
    model: NetSpec = field(default_factory=NetSpec)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    kd: KdConfig = field(default_factory=KdConfig)
    dkd: DkdConfig = field(default_factory=DkdConfig)
    uskd: UskdConfig = field(default_factory=UskdConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    label_smoothing: float = DEFAULT_LS_EPSILON
    epochs: int = 5
    out_dir: str = "runs/default"
    record_wall_time: bool = False
    log_steps: bool = False

    def validate(self):
        """Raises ConfigError on the first invalid field of any section."""
        require_choice("recipe", self.recipe, RECIPES)
        require_int("seed", self.seed)
        require_int("epochs", self.epochs, low=0)
        require_number("label_smoothing", self.label_smoothing, low=0.0, high=1.0, high_open=True)
        if not self.out_dir:
            raise ConfigError("out_dir must not be empty")
        for section in (self.dataset, self.kd, self.dkd, self.uskd, self.optim, self.teacher):
            section.validate()
        self.student_spec.validate()
        if self.recipe in TEACHER_RECIPES and not self.teacher.checkpoint:
            raise ConfigError(f"recipe {self.recipe} needs teacher.checkpoint")
        if self.recipe == "uskd":
            wanted = "cnn_gap" if self.model.kind == "cnn2stage" else "vit_token"
            if self.uskd.weak_mode != wanted:
                raise ConfigError(f"{self.model.kind} students need uskd.weak_mode={wanted}")

    @property
    def student_spec(self):
        """The model spec, with a weak head exactly when the recipe is uskd."""
        return dataclasses.replace(self.model, weak_head=self.recipe == "uskd")

    @property
    def teacher_path(self):
        return self.teacher.checkpoint.format(seed=self.seed)

    def teacher_run(self):
        """Config of the baseline run that trains this experiment's teacher."""
        return dataclasses.replace(
            self,
            recipe="baseline",
            model=self.teacher.model,
            epochs=self.teacher.epochs,
            log_steps=False,
        )

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("an experiment config must be a JSON object")
        data = dict(data)
        for key in ("recipe", "seed"):
            if key not in data:
                raise ConfigError(f"config is missing required key {key!r}")
        sections = {
            "model": NetSpec,
            "teacher": TeacherConfig,
            "dataset": DatasetConfig,
            "kd": KdConfig,
            "dkd": DkdConfig,
            "uskd": UskdConfig,
            "optim": OptimConfig,
        }
        for key, section in sections.items():
            if key in data:
                builder = getattr(section, "from_dict", None)
                data[key] = builder(data[key]) if builder else from_dict(section, data[key])
        if "dataset" in data:
            data["dataset"].image_shape = tuple(data["dataset"].image_shape)
        try:
            return from_dict(cls, data)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def apply_overrides(data, overrides):
    """Sets every ``(dotted.key, value)`` pair on a nested config dict, in order."""
    data = copy.deepcopy(data)
    for key, value in overrides:
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"cannot set {key}: {part} is not a section")
            node = child
        node[parts[-1]] = value
        logger.debug("override %s=%r", key, value)
    return data


def load_config(path, overrides=()):
    """Reads a JSON experiment config, applies overrides and validates it."""
    return ExperimentConfig.from_dict(apply_overrides(load_json(path), overrides))
