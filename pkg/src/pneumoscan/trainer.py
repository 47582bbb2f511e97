"""Fine-tuning, k-fold cross-validation and test-set prediction."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from . import imageops, metrics
from .dataset import FoldAssignment
from .modelzoo import BackboneConfig, Model, build_model, check_batch, predict_proba, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, epoch: int):
        super().__init__(f"divergence: non-finite loss in epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    momentum: float = 0.9
    batch_size: int = 16
    max_epochs: int = 20
    early_stop_patience: int = 3
    seed: int = 0
    deterministic: bool = True
    num_workers: int = 0
    # "eval": loss/accuracy of the end-of-epoch model on the training set (inference mode);
    # "running": averages over the epoch's mini-batches (cheaper)
    train_metrics: str = "eval"
    stop_at_train_accuracy: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise TrainingError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise TrainingError("max_epochs must be >= 0")
        if self.early_stop_patience < 1:
            raise TrainingError("early_stop_patience must be >= 1")
        if self.max_epochs and self.early_stop_patience >= self.max_epochs:
            log.debug("patience %d >= max_epochs %d: early stopping cannot trigger",
                      self.early_stop_patience, self.max_epochs)
        if self.train_metrics not in ("eval", "running"):
            raise TrainingError("train_metrics must be 'eval' or 'running'")

    def to_dict(self) -> dict:
        return asdict(self)


# -- data ----------------------------------------------------------------------

class ImageSet(Dataset):
    """Labelled images; items are (normalized float32 3 x S x S tensor, class index)."""

    ids: list[str]
    labels: list[int]

    def __len__(self) -> int:
        return len(self.ids)


class TensorSet(ImageSet):
    def __init__(self, images, labels: Sequence[int], ids: Sequence[str] | None = None):
        self.x = images if isinstance(images, torch.Tensor) else \
            torch.from_numpy(np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2)))
        self.x = self.x.to(torch.float32)
        self.labels = [int(v) for v in labels]
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(self.labels))]
        if len(self.ids) != len(self.labels) or self.x.shape[0] != len(self.labels):
            raise TrainingError("images, labels and ids differ in length")

    def __getitem__(self, i):
        return self.x[i], self.labels[i]

    def subset(self, idx: Sequence[int]) -> "TensorSet":
        idx = list(idx)
        return TensorSet(self.x[idx], [self.labels[i] for i in idx], [self.ids[i] for i in idx])


class FileSet(ImageSet):
    """Images read from disk and preprocessed on access.

    ``pre_size`` first resizes to the working resolution used for the
    augmentation cache, so originals and cached variants share one resampling path.
    """

    def __init__(self, paths: Sequence, labels: Sequence[int], ids: Sequence[str],
                 spec: imageops.PreprocessSpec, pre_size: int | None = None):
        if not (len(paths) == len(labels) == len(ids)):
            raise TrainingError("paths, labels and ids differ in length")
        self.paths = [Path(p) for p in paths]
        self.labels = [int(v) for v in labels]
        self.ids = list(ids)
        self.spec = spec
        self.pre_size = pre_size

    def __getitem__(self, i):
        img = imageops.load_image(self.paths[i])
        if self.pre_size is not None:
            img = imageops.resize(img, self.pre_size)
        img = imageops.preprocess(img, self.spec)
        return torch.from_numpy(img.transpose(2, 0, 1).astype(np.float32)), self.labels[i]


# -- history -------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_epoch: int | None = None
    stop_reason: str = ""

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            for e in self.epochs:
                w.writerow([e.epoch, e.train_loss, e.train_acc,
                            "" if e.val_loss is None else e.val_loss,
                            "" if e.val_acc is None else e.val_acc])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        h = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                h.epochs.append(EpochStats(
                    int(row["epoch"]), float(row["train_loss"]), float(row["train_acc"]),
                    float(row["val_loss"]) if row["val_loss"] else None,
                    float(row["val_acc"]) if row["val_acc"] else None))
        return h


# -- training ------------------------------------------------------------------

def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def _loader(ds: ImageSet, cfg: TrainConfig, shuffle: bool, generator=None) -> DataLoader:
    return DataLoader(ds, batch_size=cfg.batch_size, shuffle=shuffle, generator=generator,
                      num_workers=cfg.num_workers)


@torch.no_grad()
def _evaluate(model: Model, ds: ImageSet, cfg: TrainConfig) -> tuple[float, float]:
    model.net.eval()
    total_loss, correct = 0.0, 0
    for x, y in _loader(ds, cfg, shuffle=False):
        out = model.net(x)
        total_loss += F.cross_entropy(out, y, reduction="sum").item()
        correct += int((out.argmax(1) == y).sum())
    return total_loss / len(ds), correct / len(ds)


def train(model: Model, train_set: ImageSet, val_set: ImageSet | None, cfg: TrainConfig,
          checkpoint_dir=None, keep_epoch_checkpoints: bool = True,
          on_epoch: Callable[[EpochStats], None] | None = None) -> tuple[Model, TrainHistory]:
    """Minimise cross-entropy with momentum SGD, early-stopping on validation loss.

    The returned model carries the weights of the epoch with the lowest
    validation loss (training loss when no validation set is given).
    """
    history = TrainHistory()
    if len(train_set) == 0:
        raise TrainingError("empty training set")
    if cfg.max_epochs == 0:
        history.stop_reason = "max_epochs=0"
        return model, history
    if val_set is not None and len(val_set) == 0:
        val_set = None
    x0, _ = train_set[0]
    check_batch(model, x0[None])

    prev_det = torch.are_deterministic_algorithms_enabled()
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        _seed_everything(cfg.seed)
        gen = torch.Generator().manual_seed(cfg.seed)
        params = [p for p in model.net.parameters() if p.requires_grad]
        opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)
        best_loss, best_state, since_best = math.inf, None, 0
        ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

        for epoch in range(1, cfg.max_epochs + 1):
            model.net.train()
            run_loss, run_correct = 0.0, 0
            for x, y in _loader(train_set, cfg, shuffle=True, generator=gen):
                opt.zero_grad()
                out = model.net(x)
                loss = F.cross_entropy(out, y)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(epoch)
                loss.backward()
                opt.step()
                run_loss += loss.item() * len(y)
                run_correct += int((out.detach().argmax(1) == y).sum())
            if cfg.train_metrics == "eval":
                train_loss, train_acc = _evaluate(model, train_set, cfg)
            else:
                train_loss, train_acc = run_loss / len(train_set), run_correct / len(train_set)
            if not math.isfinite(train_loss):
                raise TrainingDiverged(epoch)
            val_loss, val_acc = _evaluate(model, val_set, cfg) if val_set is not None else (None, None)
            stats = EpochStats(epoch, train_loss, train_acc, val_loss, val_acc)
            history.epochs.append(stats)
            if on_epoch is not None:
                on_epoch(stats)
            log.info("epoch %d train_loss=%.4f train_acc=%.4f val_loss=%s val_acc=%s",
                     epoch, train_loss, train_acc, val_loss, val_acc)

            monitored = val_loss if val_loss is not None else train_loss
            if monitored < best_loss:
                best_loss, since_best = monitored, 0
                best_state = copy.deepcopy(model.net.state_dict())
                history.best_epoch = epoch
                if ckpt_dir is not None:
                    save_checkpoint(model, ckpt_dir / "best.ckpt")
            else:
                since_best += 1
            if ckpt_dir is not None and keep_epoch_checkpoints:
                save_checkpoint(model, ckpt_dir / f"epoch{epoch}.ckpt")
            history.stopped_epoch = epoch

            if cfg.stop_at_train_accuracy is not None and train_acc >= cfg.stop_at_train_accuracy:
                history.stop_reason = f"train accuracy {train_acc:.4f} reached target"
                break
            if since_best >= cfg.early_stop_patience:
                history.stop_reason = f"no validation improvement for {since_best} epochs"
                break
        else:
            history.stop_reason = "max_epochs reached"

        if best_state is not None:
            model.net.load_state_dict(best_state)
    finally:
        torch.use_deterministic_algorithms(prev_det)
    return model, history


# -- prediction ----------------------------------------------------------------

@dataclass
class Predictions:
    ids: list[str]
    labels: list[int]
    probabilities: np.ndarray  # N x k

    def to_csv(self, path) -> None:
        k = self.probabilities.shape[1]
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["record_id", "true_label", *(f"p_class{i}" for i in range(k))])
            for rid, y, row in zip(self.ids, self.labels, self.probabilities.tolist()):
                w.writerow([rid, y, *row])

    @classmethod
    def from_csv(cls, path) -> "Predictions":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            k = sum(1 for h in header if h.startswith("p_class"))
            ids, labels, probs = [], [], []
            for row in reader:
                ids.append(row[0])
                labels.append(int(row[1]))
                probs.append([float(v) for v in row[2:2 + k]])
        return cls(ids, labels, np.asarray(probs, dtype=np.float64).reshape(-1, k))


def evaluate_on_test(model: Model, test_set: ImageSet, batch_size: int = 32) -> Predictions:
    if len(test_set) == 0:
        log.warning("empty test set: writing no predictions")
        return Predictions([], [], np.zeros((0, model.num_classes)))
    rows = []
    for x, _ in DataLoader(test_set, batch_size=batch_size, shuffle=False):
        rows.append(predict_proba(model, x))
    return Predictions(list(test_set.ids), list(test_set.labels), np.concatenate(rows))


# -- cross-validation ----------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    report: metrics.MetricsReport | None
    history: TrainHistory | None
    predictions: Predictions | None = None
    error: str | None = None


def cross_validate(folds: FoldAssignment, fold_data: Callable[[int], tuple[ImageSet, ImageSet]],
                   cfg: TrainConfig, backbone: BackboneConfig, class_names: Sequence[str],
                   out_dir=None) -> list[FoldResult]:
    """Train a fresh model per fold and evaluate it on the held-out fold.

    ``fold_data(i)`` returns the (train, validation) sets for fold ``i``. A
    failing fold is recorded and the remaining folds still run.
    """
    results = []
    for i in range(folds.k):
        fold_dir = Path(out_dir) / f"fold{i}" if out_dir is not None else None
        try:
            train_set, val_set = fold_data(i)
            model = build_model(backbone)
            model, history = train(model, train_set, val_set, cfg)
            preds = evaluate_on_test(model, val_set)
            report, _ = metrics.evaluate(preds.probabilities, preds.labels, class_names)
            if fold_dir is not None:
                fold_dir.mkdir(parents=True, exist_ok=True)
                history.to_csv(fold_dir / "history.csv")
                preds.to_csv(fold_dir / "predictions.csv")
                metrics.write_outputs(fold_dir, preds.probabilities, preds.labels, class_names)
            results.append(FoldResult(i, report, history, preds))
        except Exception as e:  # one fold failing must not stop the others
            log.error("fold %d failed: %s", i, e)
            results.append(FoldResult(i, None, None, error=f"{e.__class__.__name__}: {e}"))
    if all(r.error is not None for r in results):
        raise TrainingError("all folds failed: " + "; ".join(r.error for r in results))
    return results


def summarize_folds(results: Sequence[FoldResult]) -> dict:
    out: dict = {"k": len(results), "failed": [r.fold for r in results if r.error]}
    for name in (*metrics.METRIC_NAMES, "auc"):
        mean, std = metrics.mean_std([getattr(r.report, name) for r in results if r.report])
        out[name] = {"mean": mean, "std": std}
    return out
