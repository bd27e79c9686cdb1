import glob
import json
import os

import pytest

from src.errors import ConfigError
from src.experiment import ExperimentConfig, apply_overrides, load_config
from src.sweep import SweepSpec, expand, groups, load_sweep

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = sorted(glob.glob(os.path.join(ROOT, "configs", "*.json")))
SWEEPS = sorted(glob.glob(os.path.join(ROOT, "configs", "sweeps", "*.json")))


class TestExperimentConfig:
    def test_minimal(self):
        cfg = ExperimentConfig.from_dict({"recipe": "baseline", "seed": 0})
        assert cfg.model.kind == "cnn2stage"
        assert cfg.kd.gamma == 1.5
        assert cfg.label_smoothing == 0.1

    @pytest.mark.parametrize("missing", ["recipe", "seed"])
    def test_required_keys(self, missing):
        data = {"recipe": "baseline", "seed": 0}
        del data[missing]
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(data)

    @pytest.mark.parametrize(
        "data",
        [
            {"recipe": "fitnet", "seed": 0},
            {"recipe": "baseline", "seed": "zero"},
            {"recipe": "baseline", "seed": 0, "epochs": -1},
            {"recipe": "baseline", "seed": 0, "optim": {"lr": 0.0}},
            {"recipe": "baseline", "seed": 0, "colour": "red"},
            {"recipe": "baseline", "seed": 0, "kd": {"temperature_mode": "hot"}},
            {"recipe": "kd", "seed": 0},
            {"recipe": "uskd", "seed": 0, "uskd": {"weak_mode": "vit_token"}},
            {"recipe": "baseline", "seed": 0, "dataset": {"format": "idx"}},
        ],
    )
    def test_invalid(self, data):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(data)

    def test_weak_head_only_for_uskd(self):
        assert ExperimentConfig.from_dict({"recipe": "uskd", "seed": 0}).student_spec.weak_head
        assert not ExperimentConfig.from_dict({"recipe": "ls", "seed": 0}).student_spec.weak_head

    def test_teacher_path_takes_seed(self):
        data = {"recipe": "kd", "seed": 4, "teacher": {"checkpoint": "t/seed{seed}.dkck"}}
        assert ExperimentConfig.from_dict(data).teacher_path == "t/seed4.dkck"

    def test_teacher_run(self, small_config):
        cfg = ExperimentConfig.from_dict(small_config("nkd"))
        teacher = cfg.teacher_run()
        assert teacher.recipe == "baseline"
        assert teacher.model.widths == (4, 6)
        assert teacher.epochs == 1

    def test_dict_round_trip(self, small_config):
        cfg = ExperimentConfig.from_dict(small_config("uskd"))
        assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestOverrides:
    def test_nested(self):
        data = apply_overrides({"kd": {"gamma": 1.0}}, [("kd.gamma", 2.0), ("optim.lr", 0.1)])
        assert data == {"kd": {"gamma": 2.0}, "optim": {"lr": 0.1}}

    def test_original_untouched(self):
        base = {"kd": {"gamma": 1.0}}
        apply_overrides(base, [("kd.gamma", 3.0)])
        assert base["kd"]["gamma"] == 1.0

    def test_not_a_section(self):
        with pytest.raises(ConfigError):
            apply_overrides({"seed": 0}, [("seed.value", 1)])

    def test_load_with_overrides(self, small_config, write_config):
        path = write_config(small_config())
        cfg = load_config(path, [("recipe", "nkd"), ("kd.lambda", 2.0)])
        assert cfg.recipe == "nkd"
        assert cfg.kd.temperature == 2.0


class TestShippedFiles:
    @pytest.mark.parametrize("path", CONFIGS, ids=os.path.basename)
    def test_config_validates(self, path):
        load_config(path)

    @pytest.mark.parametrize("path", SWEEPS, ids=os.path.basename)
    def test_sweep_expands(self, path):
        runs = expand(load_sweep(path))
        assert runs
        assert len({run_dir for run_dir, _ in runs}) == len(runs)


class TestSweepExpansion:
    def test_grid_product(self):
        sweep = SweepSpec(
            base={"recipe": "uskd", "seed": 0},
            seeds=[0, 1],
            grid={"uskd.alpha": [0.5, 1.0], "uskd.beta": [0.1]},
            out_dir="out",
        )
        names = [name for name, _ in groups(sweep)]
        assert names == ["uskd.alpha=0.5,uskd.beta=0.1", "uskd.alpha=1.0,uskd.beta=0.1"]
        runs = expand(sweep)
        assert len(runs) == 4
        run_dir, data = runs[1]
        assert run_dir == os.path.join("out", names[0], "seed1")
        assert data["seed"] == 1
        assert data["uskd"]["alpha"] == 0.5
        assert data["out_dir"] == run_dir

    def test_variants(self):
        sweep = SweepSpec(
            base={"recipe": "baseline", "seed": 0},
            variants=[{"name": "plain"}, {"name": "smooth", "set": {"recipe": "ls"}}],
        )
        runs = expand(sweep)
        assert [data["recipe"] for _, data in runs] == ["baseline", "ls"]

    def test_invalid_run_rejected(self):
        sweep = SweepSpec(base={"recipe": "baseline", "seed": 0}, grid={"kd.gamma": [-1.0]})
        with pytest.raises(ConfigError):
            expand(sweep)

    @pytest.mark.parametrize(
        "data",
        [
            {"base": {}, "seeds": []},
            {"base": {}, "grid": {"a": [1]}, "variants": [{"name": "x"}]},
            {"base": {}, "grid": {"a": []}},
            {"base": {}, "variants": [{"set": {}}]},
            {"base": {}, "workers": 0},
        ],
    )
    def test_invalid_sweep(self, tmp_path, data):
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        with pytest.raises(ConfigError):
            load_sweep(str(path))
