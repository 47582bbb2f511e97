"""Experiment configuration: one serializable record of everything a run depends on."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .dataset import Scheme
from .imageops import IMAGENET_MEAN, IMAGENET_STD, AugmentationSpec, PreprocessSpec
from .modelzoo import ARCHITECTURES
from .trainer import TrainConfig

DATA_ENV = "PNEUMOSCAN_DATA"


@dataclass(frozen=True)
class Seeds:
    split: int = 0
    fold: int = 0
    augment: int = 0
    head: int = 0
    train: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_root: str | None = None
    workdir: str = "pneumoscan_out"
    scheme: str = Scheme.NORMAL_VS_PNEUMONIA.value
    architectures: tuple[str, ...] = tuple(ARCHITECTURES)
    weights_source: str = "imagenet"
    freeze_backbone: bool = False
    test_fraction: float = 0.08
    pin_test_counts: bool = False
    by_subject: bool = False
    k: int = 5
    validation_fraction: float = 0.10
    work_size: int = 256
    channel_mean: tuple[float, float, float] = IMAGENET_MEAN
    channel_std: tuple[float, float, float] = IMAGENET_STD
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: Seeds = field(default_factory=Seeds)

    def __post_init__(self):
        Scheme(self.scheme)
        for a in self.architectures:
            if a not in ARCHITECTURES:
                raise ValueError(f"unknown architecture {a!r}")

    @property
    def scheme_enum(self) -> Scheme:
        return Scheme(self.scheme)

    def preprocess_for(self, architecture: str) -> PreprocessSpec:
        return PreprocessSpec(ARCHITECTURES[architecture].input_size, tuple(self.channel_mean),
                              tuple(self.channel_std))

    def resolved_root(self) -> str | None:
        return self.dataset_root or os.environ.get(DATA_ENV)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["architectures"] = list(self.architectures)
        d["channel_mean"] = list(self.channel_mean)
        d["channel_std"] = list(self.channel_std)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "augmentation" in kw:
            kw["augmentation"] = AugmentationSpec(**kw["augmentation"])
        if "train" in kw:
            kw["train"] = TrainConfig(**kw["train"])
        if "seeds" in kw:
            kw["seeds"] = Seeds(**kw["seeds"])
        for key in ("architectures", "channel_mean", "channel_std"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def override(self, flat: Mapping[str, Any]) -> "ExperimentConfig":
        """Apply dotted-key overrides such as ``{"train.learning_rate": 1e-3}``; None values are ignored."""
        top: dict[str, Any] = {}
        nested: dict[str, dict[str, Any]] = {}
        for key, value in flat.items():
            if value is None:
                continue
            if "." in key:
                group, name = key.split(".", 1)
                nested.setdefault(group, {})[name] = value
            else:
                top[key] = value
        for group, values in nested.items():
            top[group] = replace(getattr(self, group), **values)
        return replace(self, **top)
