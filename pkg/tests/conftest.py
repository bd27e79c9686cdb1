import copy
import json

import numpy as np
import pytest

SMALL_CONFIG = {
    "recipe": "baseline",
    "seed": 3,
    "epochs": 2,
    "model": {"kind": "cnn2stage", "widths": [3, 4], "num_classes": 4, "input_shape": [1, 8, 8]},
    "teacher": {
        "model": {
            "kind": "cnn2stage",
            "widths": [4, 6],
            "num_classes": 4,
            "input_shape": [1, 8, 8],
        },
        "checkpoint": "",
        "train_if_missing": True,
        "epochs": 1,
    },
    "dataset": {
        "format": "synthetic",
        "num_classes": 4,
        "synthetic_train": 48,
        "synthetic_test": 24,
        "image_shape": [1, 8, 8],
        "data_seed": 1,
    },
    "optim": {"lr": 0.05, "momentum": 0.9, "weight_decay": 0.0001, "batch_size": 16},
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config(tmp_path):
    """Config dict for a seconds-long run inside ``tmp_path``."""

    def make(recipe="baseline", **top):
        data = copy.deepcopy(SMALL_CONFIG)
        data["recipe"] = recipe
        data["out_dir"] = str(tmp_path / "runs" / recipe)
        data["teacher"]["checkpoint"] = str(tmp_path / "teachers" / "teacher_seed{seed}.dkck")
        data.update(top)
        return data

    return make


@pytest.fixture
def write_config(tmp_path):
    def write(data, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return str(path)

    return write
