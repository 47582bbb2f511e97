"""Results table and figures (accuracy bars, ROC overlays, confusion heatmaps) from run directories."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import metrics  # noqa: E402
from .dataset import Scheme  # noqa: E402
from .modelzoo import ARCHITECTURES  # noqa: E402
from .trainer import Predictions, TrainHistory  # noqa: E402

log = logging.getLogger(__name__)

RESULTS_HEADER = ("task", "model", "accuracy", "sensitivity", "specificity", "precision", "auc", "f1")
_PNG_META = {"Software": None}


class ReportError(RuntimeError):
    pass


@dataclass
class RunSummary:
    run_dir: Path
    scheme: str
    architecture: str
    class_names: list[str]
    report: metrics.MetricsReport
    predictions: Predictions
    train_accuracy: float | None


def load_run(run_dir) -> RunSummary | None:
    run_dir = Path(run_dir)
    pred_path = run_dir / "predictions.csv"
    cfg_path = run_dir / "config.json"
    if not pred_path.exists() or not cfg_path.exists():
        log.warning("skipping %s: missing predictions.csv or config.json", run_dir)
        return None
    cfg = json.loads(cfg_path.read_text())
    preds = Predictions.from_csv(pred_path)
    class_names = cfg["class_names"]
    metrics_path = run_dir / "metrics.json"
    if not metrics_path.exists():
        metrics.write_outputs(run_dir, preds.probabilities, preds.labels, class_names)
    report = metrics.MetricsReport.from_dict(json.loads(metrics_path.read_text()))
    train_acc = None
    if (run_dir / "history.csv").exists():
        h = TrainHistory.from_csv(run_dir / "history.csv")
        by_epoch = {e.epoch: e for e in h.epochs}
        best = min(h.epochs, key=lambda e: (e.val_loss if e.val_loss is not None else e.train_loss),
                   default=None)
        if best is not None:
            train_acc = by_epoch[best.epoch].train_acc
    return RunSummary(run_dir, cfg["scheme"], cfg["architecture"], class_names, report, preds, train_acc)


def _sort_key(r: RunSummary):
    schemes = [s.value for s in Scheme]
    archs = list(ARCHITECTURES)
    return (schemes.index(r.scheme) if r.scheme in schemes else len(schemes), r.scheme,
            archs.index(r.architecture) if r.architecture in archs else len(archs), r.architecture,
            r.run_dir.as_posix())


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def write_results_csv(runs: Sequence[RunSummary], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in runs:
            m = r.report
            w.writerow([r.scheme, r.architecture, _cell(m.accuracy), _cell(m.sensitivity),
                        _cell(m.specificity), _cell(m.precision), _cell(m.auc), _cell(m.f1)])
    return path


def accuracy_chart(runs: Sequence[RunSummary], scheme: str, path) -> Path:
    names = [r.architecture for r in runs]
    x = np.arange(len(runs))
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(runs)), 3.5))
    train = [r.train_accuracy if r.train_accuracy is not None else 0.0 for r in runs]
    test = [r.report.accuracy if r.report.accuracy is not None else 0.0 for r in runs]
    ax.bar(x - 0.2, train, 0.4, label="train")
    ax.bar(x + 0.2, test, 0.4, label="test")
    ax.set_xticks(x, names)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.set_title(scheme)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def _micro_roc(p: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray, float]:
    k = p.shape[1]
    onehot = np.eye(k)[np.asarray(labels)]
    curve, auc = metrics.roc_auc(p.ravel(), onehot.ravel())
    return curve.fpr, curve.tpr, auc


def roc_overlay(runs: Sequence[RunSummary], scheme: str, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for r in runs:
        p, y = r.predictions.probabilities, r.predictions.labels
        if len(set(y)) < 2:
            log.warning("no ROC for %s: single-class test labels", r.run_dir)
            continue
        if p.shape[1] == 2:
            curve, auc = metrics.roc_auc(p[:, 1], np.asarray(y) == 1)
            fpr, tpr = curve.fpr, curve.tpr
        else:
            fpr, tpr, auc = _micro_roc(p, y)
        ax.plot(fpr, tpr, label=f"{r.architecture} (AUC {auc:.3f})")
    ax.plot([0, 1], [0, 1], color="grey", linestyle=":", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(scheme)
    ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def confusion_heatmap(r: RunSummary, path) -> Path:
    cm = metrics.confusion(r.predictions.labels, metrics.predicted_labels(r.predictions.probabilities),
                           len(r.class_names), r.class_names)
    fig, ax = plt.subplots(figsize=(3.2 + 0.6 * cm.k, 3 + 0.5 * cm.k))
    im = ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(cm.k), cm.class_names)
    ax.set_yticks(range(cm.k), cm.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    thresh = cm.counts.max() / 2 if cm.total else 0
    for i in range(cm.k):
        for j in range(cm.k):
            ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center",
                    color="white" if cm.counts[i, j] > thresh else "black")
    fig.colorbar(im, ax=ax)
    ax.set_title(f"{r.architecture}")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def build_report(run_dirs: Sequence, out_dir) -> Path:
    """Write results.csv plus per-scheme and per-run figures; returns the results.csv path."""
    if not run_dirs:
        raise ReportError("no run directories given")
    runs = [r for r in (load_run(d) for d in run_dirs) if r is not None]
    if not runs:
        raise ReportError("none of the given runs has predictions")
    runs.sort(key=_sort_key)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = write_results_csv(runs, out / "results.csv")
    for scheme in dict.fromkeys(r.scheme for r in runs):
        group = [r for r in runs if r.scheme == scheme]
        accuracy_chart(group, scheme, out / f"accuracy.{scheme}.png")
        roc_overlay(group, scheme, out / f"roc.{scheme}.png")
    for r in runs:
        confusion_heatmap(r, out / f"confusion.{r.scheme}.{r.architecture}.{r.run_dir.name}.png")
    return results
