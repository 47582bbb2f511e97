"""Pipeline stages wired together over a working directory.

Layout::

    <workdir>/manifest.json
    <workdir>/split.<scheme>.json
    <workdir>/<scheme>/folds.k<k>.json
    <workdir>/<scheme>/augmented.json
    <workdir>/<scheme>/augmented/<class>/<source>.<transform>.png
    <workdir>/runs/<scheme>/<architecture>/<run_name>/
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import imageops, metrics
from .activations import write_activation_report
from .config import DATA_ENV, ExperimentConfig
from .modelzoo import BackboneConfig, build_model, load_checkpoint, save_checkpoint
from .trainer import (FileSet, cross_validate, evaluate_on_test, summarize_folds, train)

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class Workdir:
    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    def split(self, scheme: ds.Scheme) -> Path:
        return self.root / f"split.{scheme.value}.json"

    def folds(self, scheme: ds.Scheme, k: int) -> Path:
        return self.root / scheme.value / f"folds.k{k}.json"

    def augmented(self, scheme: ds.Scheme) -> Path:
        return self.root / scheme.value / "augmented.json"

    def cache(self, scheme: ds.Scheme) -> Path:
        return self.root / scheme.value / "augmented"

    def runs(self, scheme: ds.Scheme, architecture: str) -> Path:
        return self.root / "runs" / scheme.value / architecture


def _wd(cfg: ExperimentConfig) -> Workdir:
    return Workdir(Path(cfg.workdir))


# -- data stages ----------------------------------------------------------------

def scan(cfg: ExperimentConfig) -> ds.DatasetManifest:
    root = cfg.resolved_root()
    if not root:
        raise PipelineError(f"no dataset root: pass --root or set {DATA_ENV}")
    manifest = ds.scan_dataset(root, seed=cfg.seeds.split)
    ds.save_manifest(manifest, _wd(cfg).manifest)
    return manifest


def load_manifest(cfg: ExperimentConfig) -> ds.DatasetManifest:
    path = _wd(cfg).manifest
    if not path.exists():
        raise PipelineError(f"{path} missing: run `pneumoscan scan` first")
    return ds.load_manifest(path)


def split(cfg: ExperimentConfig, manifest: ds.DatasetManifest | None = None) -> ds.SplitManifest:
    manifest = manifest or load_manifest(cfg)
    scheme = cfg.scheme_enum
    counts = ds.REFERENCE_TEST_COUNTS[scheme] if cfg.pin_test_counts else None
    s = ds.make_split(manifest, scheme, cfg.test_fraction, cfg.seeds.split, test_counts=counts,
                      by_subject=cfg.by_subject)
    ds.save_split(s, _wd(cfg).split(scheme))
    return s


def load_split(cfg: ExperimentConfig) -> ds.SplitManifest:
    path = _wd(cfg).split(cfg.scheme_enum)
    if not path.exists():
        raise PipelineError(f"{path} missing: run `pneumoscan split --scheme {cfg.scheme}` first")
    return ds.load_split(path)


def folds(cfg: ExperimentConfig, manifest=None, split_=None) -> ds.FoldAssignment:
    manifest = manifest or load_manifest(cfg)
    split_ = split_ or load_split(cfg)
    f = ds.kfold(split_.train_ids, manifest, cfg.k, cfg.seeds.fold)
    ds.save_folds(f, _wd(cfg).folds(cfg.scheme_enum, cfg.k))
    return f


def _scheme_classes(manifest: ds.DatasetManifest, scheme: ds.Scheme, ids) -> dict[str, str]:
    by_id = manifest.by_id()
    return {rid: scheme.class_of(by_id[rid].label) for rid in ids}


def augment(cfg: ExperimentConfig, manifest=None, split_=None) -> imageops.AugmentedManifest:
    manifest = manifest or load_manifest(cfg)
    split_ = split_ or load_split(cfg)
    scheme = cfg.scheme_enum
    by_id = manifest.by_id()
    train_records = _scheme_classes(manifest, scheme, split_.train_ids)
    hashes = {rid: by_id[rid].content_hash for rid in train_records}
    aug = imageops.expand_training_set(train_records, cfg.augmentation, cfg.seeds.augment, hashes)
    wd = _wd(cfg)
    previous = None
    if wd.augmented(scheme).exists():
        previous = imageops.AugmentedManifest.from_dict(ds.load_json(wd.augmented(scheme)))
    aug = imageops.materialize(aug, manifest.root, wd.cache(scheme), cfg.work_size, previous)
    ds.dump_json(aug.to_dict(), wd.augmented(scheme))
    return aug


def load_augmented(cfg: ExperimentConfig) -> imageops.AugmentedManifest | None:
    path = _wd(cfg).augmented(cfg.scheme_enum)
    if not path.exists():
        return None
    return imageops.AugmentedManifest.from_dict(ds.load_json(path))


# -- datasets for training ------------------------------------------------------

def _original_set(cfg, manifest, ids, arch) -> FileSet:
    scheme = cfg.scheme_enum
    labels = ds.scheme_labels(manifest, scheme, ids)
    ids = sorted(ids)
    return FileSet([Path(manifest.root) / rid for rid in ids], [labels[r] for r in ids], ids,
                   cfg.preprocess_for(arch), pre_size=cfg.work_size)


def _augmented_set(cfg, aug, sources: set[str], arch) -> FileSet:
    scheme = cfg.scheme_enum
    cache = _wd(cfg).cache(scheme)
    recs = [r for r in aug.records if r.source_id in sources]
    return FileSet([r.cache_path(cache) for r in recs],
                   [scheme.class_names.index(r.class_name) for r in recs],
                   [r.aug_id for r in recs], cfg.preprocess_for(arch))


def _holdout(cfg, manifest, ids: list[str]) -> tuple[list[str], list[str]]:
    """Stratified validation holdout of source records (variants follow their source)."""
    if cfg.validation_fraction <= 0:
        return sorted(ids), []
    keep = set(ids)
    sub = ds.DatasetManifest(root=manifest.root,
                             records=tuple(r for r in manifest.records if r.record_id in keep))
    s = ds.make_split(sub, cfg.scheme_enum, cfg.validation_fraction, cfg.seeds.split + 1)
    return list(s.train_ids), list(s.test_ids)


def training_sets(cfg, manifest, split_, aug, arch, pool_ids=None, val_ids=None):
    pool = sorted(pool_ids if pool_ids is not None else split_.train_ids)
    if val_ids is None:
        pool, val_ids = _holdout(cfg, manifest, pool)
    if aug is not None:
        train_set = _augmented_set(cfg, aug, set(pool), arch)
    else:
        log.warning("no augmented manifest for %s: training on originals", cfg.scheme)
        train_set = _original_set(cfg, manifest, pool, arch)
    return train_set, _original_set(cfg, manifest, val_ids, arch)


# -- training stages --------------------------------------------------------------

def _backbone(cfg: ExperimentConfig, arch: str) -> BackboneConfig:
    return BackboneConfig(arch, len(cfg.scheme_enum.class_names), cfg.weights_source, cfg.seeds.head,
                          cfg.freeze_backbone)


def _run_dir(cfg, arch, run_name) -> Path:
    name = run_name or time.strftime("%Y%m%d-%H%M%S")
    d = _wd(cfg).runs(cfg.scheme_enum, arch) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_config(run_dir: Path, cfg: ExperimentConfig, arch: str, **extra) -> None:
    payload = {"experiment": cfg.to_dict(), "architecture": arch, "scheme": cfg.scheme,
               "class_names": list(cfg.scheme_enum.class_names),
               "backbone": _backbone(cfg, arch).to_dict(), **extra}
    (run_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def train_run(cfg: ExperimentConfig, arch: str, run_name: str | None = None,
              keep_epoch_checkpoints: bool = True) -> Path:
    """Train one (scheme, architecture) pair and evaluate it on the held-out test set."""
    manifest, split_ = load_manifest(cfg), load_split(cfg)
    aug = load_augmented(cfg)
    run_dir = _run_dir(cfg, arch, run_name)
    cfg = cfg.override({"train.seed": cfg.seeds.train})
    _write_config(run_dir, cfg, arch)
    train_set, val_set = training_sets(cfg, manifest, split_, aug, arch)
    log.info("training %s on %d images, validating on %d", arch, len(train_set), len(val_set))
    model = build_model(_backbone(cfg, arch))
    model, history = train(model, train_set, val_set, cfg.train, run_dir / "checkpoints",
                           keep_epoch_checkpoints)
    if not history.epochs:
        log.warning("no epochs run: predictions come from the untrained model")
        save_checkpoint(model, run_dir / "checkpoints" / "best.ckpt")
    history.to_csv(run_dir / "history.csv")
    test_set = _original_set(cfg, manifest, split_.test_ids, arch)
    preds = evaluate_on_test(model, test_set)
    preds.to_csv(run_dir / "predictions.csv")
    metrics.write_outputs(run_dir, preds.probabilities, preds.labels, cfg.scheme_enum.class_names)
    return run_dir


def cv_run(cfg: ExperimentConfig, arch: str, run_name: str | None = None) -> tuple[Path, dict]:
    manifest, split_ = load_manifest(cfg), load_split(cfg)
    aug = load_augmented(cfg)
    f = folds(cfg, manifest, split_)
    run_dir = _run_dir(cfg, arch, (run_name or time.strftime("%Y%m%d-%H%M%S")) + f"-cv{cfg.k}")
    cfg = cfg.override({"train.seed": cfg.seeds.train})
    _write_config(run_dir, cfg, arch, k=cfg.k)

    def fold_data(i):
        return training_sets(cfg, manifest, split_, aug, arch, pool_ids=f.train_ids_for(i),
                             val_ids=f.fold_ids(i))

    results = cross_validate(f, fold_data, cfg.train, _backbone(cfg, arch), cfg.scheme_enum.class_names,
                             out_dir=run_dir)
    summary = summarize_folds(results)
    summary["folds"] = [{"fold": r.fold, "error": r.error,
                         "metrics": r.report.to_dict() if r.report else None} for r in results]
    (run_dir / "cv_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return run_dir, summary


def activations(checkpoint, images, out_dir, layer: str = "first_conv", grid=None,
                mean=imageops.IMAGENET_MEAN, std=imageops.IMAGENET_STD) -> list[Path]:
    model = load_checkpoint(checkpoint)
    spec = imageops.PreprocessSpec(model.input_size, tuple(mean), tuple(std))
    outputs = []
    for path in images:
        img = imageops.preprocess(imageops.load_image(path), spec)
        outputs.append(write_activation_report(model, img.astype(np.float32), Path(path).stem,
                                               out_dir, layer, grid))
    return outputs
