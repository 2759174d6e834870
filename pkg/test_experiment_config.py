"""
Tests for the experiment JSON file
"""
import json

import pytest

from ensemble import FusionMethod
from errors import ConfigError
from experiment_config import dump_resolved, load_experiment, parse_experiment
from model_zoo import Architecture


def _write(tmp_path, raw):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


def _minimal(**extra):
    raw = {
        "dataset": {"root": "shapes", "class_table": "classes.json"},
        "model": {"architecture": "unet", "encoder": "efficientnet-b0", "encoder_pretrained": False},
    }
    raw.update(extra)
    return raw


def test_defaults_are_filled(tmp_path, class_table_path):
    cfg, table = load_experiment(_write(tmp_path, _minimal()))
    assert table.num_classes == 3
    assert cfg.model.num_classes == 3
    assert cfg.train.learning_rate == 0.0001
    assert cfg.train.train_batch_size == 8 and cfg.train.valid_batch_size == 1
    assert cfg.metrics.threshold == 0.5
    assert cfg.preprocess.target_height == 320 and cfg.preprocess.target_width == 480
    assert cfg.preprocess.augment is not None
    assert cfg.dataset.root == tmp_path / "shapes"
    assert cfg.train.checkpoint_dir == cfg.run_dir


def test_augmentation_can_be_disabled(tmp_path, class_table_path):
    cfg, _ = load_experiment(_write(tmp_path, _minimal(preprocess={"augment": None})))
    assert cfg.preprocess.augment is None


def test_resolved_file_parses_back(tmp_path, class_table_path):
    cfg, _ = load_experiment(_write(tmp_path, _minimal(output={"root": str(tmp_path / "runs"), "run_name": "r1"})))
    resolved = dump_resolved(cfg, tmp_path / "runs" / "r1" / "config.resolved.json")
    data = json.loads(resolved.read_text())
    assert data["train"]["learning_rate"] == 0.0001
    again, _ = load_experiment(resolved)
    assert again == cfg


def test_paths_resolve_against_config_directory(tmp_path, class_table_path, monkeypatch):
    (tmp_path / "experiments").mkdir()
    raw = _minimal(output={"root": "../runs", "run_name": "unet_b0"})
    raw["dataset"] = {"root": "../shapes", "class_table": "../classes.json"}
    path = tmp_path / "experiments" / "unet_b0.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    elsewhere = tmp_path / "elsewhere"
    elsewhere.mkdir()
    monkeypatch.chdir(elsewhere)

    cfg, _ = load_experiment(path)
    assert cfg.dataset.root.resolve() == tmp_path / "shapes"
    assert cfg.run_dir.resolve() == tmp_path / "runs" / "unet_b0"
    assert cfg.train.checkpoint_dir == cfg.run_dir

    data = json.loads(dump_resolved(cfg, cfg.run_dir / "config.resolved.json").read_text())
    assert data["output"]["root"] == str(tmp_path / "runs")
    assert data["train"]["checkpoint_dir"] == str(tmp_path / "runs" / "unet_b0")
    assert (tmp_path / "runs" / "unet_b0" / "config.resolved.json").is_file()


def test_default_output_sits_next_to_config(tmp_path, class_table_path):
    cfg, _ = load_experiment(_write(tmp_path, _minimal()))
    assert cfg.output.root == tmp_path / "runs"


def test_variant_expands_to_unet_and_fpn(tmp_path, class_table_path):
    raw = _minimal(ensemble={"variant": "EL-2", "encoder_pretrained": False, "fusion": {"weights": [1.0, 1.0]}})
    del raw["model"]
    cfg, _ = load_experiment(_write(tmp_path, raw))
    specs = cfg.member_specs()
    assert [s.architecture for s in specs] == [Architecture.UNET, Architecture.FPN]
    assert {s.encoder for s in specs} == {"efficientnet-b2"}
    assert cfg.ensemble.fusion.method == FusionMethod.WEIGHTED_AVERAGE
    assert cfg.num_classes == 3


@pytest.mark.parametrize("raw, field", [
    (_minimal(train={"learning_rate": -1}), "train.learning_rate"),
    (_minimal(train={"epochs": 0}), "train.epochs"),
    (_minimal(metrics={"threshold": 2}), "metrics.threshold"),
    (_minimal(bogus=1), "bogus"),
    (_minimal(model={"architecture": "segformer"}), "model.architecture"),
    (_minimal(train={"learnig_rate": 0.1}), "train.learnig_rate"),
    (_minimal(preprocess={"target_hieght": 64}), "preprocess.target_hieght"),
    (_minimal(preprocess={"augment": {"hflip": 0.5}}), "preprocess.augment.hflip"),
    (_minimal(metrics={"treshold": 0.9}), "metrics.treshold"),
    (_minimal(model={"architecture": "unet", "encodr": "efficientnet-b1"}), "model.encodr"),
    (_minimal(output={"run": "x"}), "output.run"),
])
def test_invalid_fields_name_their_path(tmp_path, class_table_path, raw, field):
    with pytest.raises(ConfigError) as exc:
        load_experiment(_write(tmp_path, raw))
    assert field in str(exc.value)


def test_model_and_ensemble_are_exclusive(tmp_path, class_table_path):
    raw = _minimal(ensemble={"variant": "EL-0"})
    with pytest.raises(ConfigError):
        load_experiment(_write(tmp_path, raw))
    del raw["model"], raw["ensemble"]
    with pytest.raises(ConfigError):
        load_experiment(_write(tmp_path, raw))


@pytest.mark.parametrize("variant", ["EL-9x", "EL-5", "EL-9", "el-0"])
def test_bad_variant(tmp_path, class_table_path, variant):
    raw = _minimal(ensemble={"variant": variant, "encoder_pretrained": False})
    del raw["model"]
    with pytest.raises(ConfigError) as exc:
        load_experiment(_write(tmp_path, raw))
    assert "ensemble" in str(exc.value)


def test_class_count_mismatch(tmp_path, class_table_path):
    raw = _minimal()
    raw["model"]["num_classes"] = 5
    with pytest.raises(ConfigError) as exc:
        load_experiment(_write(tmp_path, raw))
    assert "num_classes" in str(exc.value)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_experiment(bad)
    with pytest.raises(ConfigError):
        parse_experiment([1, 2, 3])
