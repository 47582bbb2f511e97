import pytest

from pneumoscan.config import ExperimentConfig, Seeds
from pneumoscan.imageops import AugmentationSpec
from pneumoscan.trainer import TrainConfig


def test_roundtrip(tmp_path):
    cfg = ExperimentConfig(dataset_root="/data", scheme="bacterial-vs-viral", architectures=("alexnet",),
                           augmentation=AugmentationSpec(target_per_class=100),
                           train=TrainConfig(max_epochs=3, stop_at_train_accuracy=0.99), seeds=Seeds(split=4))
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


def test_training_defaults():
    t = ExperimentConfig().train
    assert (t.learning_rate, t.momentum, t.batch_size) == (3e-4, 0.9, 16)
    assert ExperimentConfig().preprocess_for("alexnet").target_size == 227
    assert ExperimentConfig().preprocess_for("densenet201").target_size == 224


def test_override_and_validation():
    cfg = ExperimentConfig().override({"train.learning_rate": 0.1, "seeds.split": 9, "k": None})
    assert cfg.train.learning_rate == 0.1 and cfg.seeds.split == 9 and cfg.k == 5
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"epochs": 3})
    with pytest.raises(ValueError):
        ExperimentConfig(scheme="cats-vs-dogs")


def test_root_from_environment(monkeypatch):
    monkeypatch.setenv("PNEUMOSCAN_DATA", "/mnt/xray")
    assert ExperimentConfig().resolved_root() == "/mnt/xray"
    assert ExperimentConfig(dataset_root="/here").resolved_root() == "/here"
