"""Confusion matrices, the accuracy/sensitivity/specificity/precision/F1 suite, and ROC/AUC.

Undefined values (zero denominators) are represented as ``None`` and listed in
the report's ``undefined`` field, never silently replaced by 0.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "precision", "f1")


class MetricsError(ValueError):
    pass


class AUCUndefined(MetricsError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are the true class, columns the predicted class."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> list[int]:
        return [int(v) for v in self.counts.sum(axis=1)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["true\\pred", *self.class_names])
            for name, row in zip(self.class_names, self.counts):
                w.writerow([name, *(int(v) for v in row)])


@dataclass(frozen=True)
class BinaryCounts:
    tp: int
    tn: int
    fp: int
    fn: int
    positive_class: str = "1"

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class MetricsReport:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    precision: float | None
    f1: float | None
    auc: float | None = None
    averaging: str = "binary"
    undefined: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "precision": self.precision,
            "f1": self.f1,
            "auc": self.auc,
            "averaging": self.averaging,
            "undefined": list(self.undefined),
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d.get(k) for k in (*METRIC_NAMES, "auc")},
                   averaging=d.get("averaging", "binary"),
                   undefined=list(d.get("undefined", [])),
                   notes=list(d.get("notes", [])))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def confusion(true_labels: Sequence[int], predicted_labels: Sequence[int], k: int,
              class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise MetricsError(f"label lists differ in shape: {t.shape} vs {p.shape}")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise MetricsError(f"{name} label out of range [0, {k})")
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(k))
    if len(names) != k:
        raise MetricsError(f"expected {k} class names, got {len(names)}")
    return ConfusionMatrix(counts=counts, class_names=names)


def binary_counts(cm: ConfusionMatrix, positive: int) -> BinaryCounts:
    c = cm.counts
    tp = int(c[positive, positive])
    fn = int(c[positive, :].sum()) - tp
    fp = int(c[:, positive].sum()) - tp
    tn = int(c.sum()) - tp - fn - fp
    return BinaryCounts(tp=tp, tn=tn, fp=fp, fn=fn, positive_class=cm.class_names[positive])


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def basic_metrics(c: BinaryCounts) -> dict[str, float | None]:
    # precision uses TP + FP; the TN + FP denominator sometimes printed for PPV is a typo
    return {
        "accuracy": _ratio(c.tp + c.tn, c.total),
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
        "specificity": _ratio(c.tn, c.fp + c.tn),
        "precision": _ratio(c.tp, c.tp + c.fp),
        "f1": _ratio(2 * c.tp, 2 * c.tp + c.fn + c.fp),
    }


def binary_report(cm: ConfusionMatrix, positive: int = 1) -> MetricsReport:
    values = basic_metrics(binary_counts(cm, positive))
    return MetricsReport(**values, averaging="binary",
                         undefined=[k for k, v in values.items() if v is None])


def macro_metrics(cm: ConfusionMatrix, average: str = "macro") -> MetricsReport:
    """Average per-class one-vs-rest metrics.

    ``accuracy`` is always the overall fraction of correct predictions
    (trace / total); the remaining four are averaged. With ``average="micro"``
    the per-class counts are pooled before the ratios are taken.
    """
    if cm.k < 2:
        raise MetricsError("need at least two classes")
    per_class = [binary_counts(cm, i) for i in range(cm.k)]
    accuracy = _ratio(int(np.trace(cm.counts)), cm.total)
    undefined: list[str] = [] if accuracy is not None else ["accuracy"]
    notes: list[str] = []
    values: dict[str, float | None] = {"accuracy": accuracy}
    if average == "micro":
        pooled = BinaryCounts(tp=sum(c.tp for c in per_class), tn=sum(c.tn for c in per_class),
                              fp=sum(c.fp for c in per_class), fn=sum(c.fn for c in per_class))
        for name, v in basic_metrics(pooled).items():
            if name != "accuracy":
                values[name] = v
                if v is None:
                    undefined.append(name)
        return MetricsReport(**values, averaging="micro_ovr", undefined=undefined)
    if average != "macro":
        raise MetricsError(f"unknown averaging {average!r}")
    per_values = [basic_metrics(c) for c in per_class]
    for name in METRIC_NAMES[1:]:
        defined = [v[name] for v in per_values if v[name] is not None]
        skipped = [cm.class_names[i] for i, v in enumerate(per_values) if v[name] is None]
        if skipped:
            notes.append(f"{name}: excluded undefined classes {skipped}")
        if defined:
            values[name] = sum(defined) / len(defined)
        else:
            values[name] = None
            undefined.append(name)
    return MetricsReport(**values, averaging="macro_ovr", undefined=undefined, notes=notes)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> tuple[RocCurve, float]:
    """ROC over every distinct score threshold and its trapezoidal area.

    A record is called positive when its score is >= the threshold. The first
    point uses an infinite threshold so the curve starts at (0, 0).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise AUCUndefined("AUC undefined: labels contain a single class")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_run = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last_of_run]
    fps = (last_of_run + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last_of_run]]
    area = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds), area


def multiclass_auc(probabilities, labels: Sequence[int]) -> tuple[float | None, list[int]]:
    """Macro average of one-vs-rest AUCs; returns the AUC and the skipped classes."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2 or p.shape[1] < 2:
        raise MetricsError("probabilities must be N x k with k >= 2")
    aucs, skipped = [], []
    for c in range(p.shape[1]):
        try:
            aucs.append(roc_auc(p[:, c], y == c)[1])
        except AUCUndefined:
            skipped.append(c)
    return (sum(aucs) / len(aucs) if aucs else None), skipped


def predicted_labels(probabilities) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.asarray(probabilities).argmax(axis=1)


def evaluate(probabilities, labels: Sequence[int], class_names: Sequence[str],
             positive: int = 1, average: str = "macro") -> tuple[MetricsReport, ConfusionMatrix]:
    """Full report (confusion-derived metrics plus AUC) for a set of predictions."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1, len(class_names))
    y = np.asarray(labels, dtype=np.int64)
    k = len(class_names)
    cm = confusion(y, predicted_labels(p), k, class_names)
    if k == 2:
        report = binary_report(cm, positive)
        try:
            report.auc = roc_auc(p[:, positive], y == positive)[1]
        except AUCUndefined as e:
            report.undefined.append("auc")
            report.notes.append(str(e))
    else:
        report = macro_metrics(cm, average)
        report.auc, skipped = multiclass_auc(p, y)
        if skipped:
            report.notes.append(f"auc: skipped classes {[class_names[i] for i in skipped]}")
        if report.auc is None:
            report.undefined.append("auc")
    return report, cm


def roc_rows(probabilities, labels: Sequence[int], positive: int = 1) -> list[tuple]:
    """Rows for roc.csv: (fpr, tpr, threshold) for binary, (class, fpr, tpr, threshold) otherwise."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape[1] == 2:
        curve, _ = roc_auc(p[:, positive], y == positive)
        return list(zip(curve.fpr.tolist(), curve.tpr.tolist(), curve.thresholds.tolist()))
    rows = []
    for c in range(p.shape[1]):
        try:
            curve, _ = roc_auc(p[:, c], y == c)
        except AUCUndefined:
            continue
        rows += [(c, *r) for r in zip(curve.fpr.tolist(), curve.tpr.tolist(), curve.thresholds.tolist())]
    return rows


def write_outputs(out_dir, probabilities, labels, class_names, positive: int = 1) -> MetricsReport:
    """Write metrics.json, confusion.csv and roc.csv for one set of predictions."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report, cm = evaluate(probabilities, labels, class_names, positive)
    payload = {"class_names": list(class_names), "n": cm.total, **report.to_dict()}
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    cm.to_csv(out / "confusion.csv")
    with open(out / "roc.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"] if len(class_names) == 2
                   else ["class", "fpr", "tpr", "threshold"])
        if len(labels) and len(set(np.asarray(labels).tolist())) > 1:
            w.writerows(roc_rows(np.asarray(probabilities).reshape(-1, len(class_names)), labels, positive))
    return report


def mean_std(values: Sequence[float | None]) -> tuple[float | None, float | None]:
    v = [x for x in values if x is not None and not math.isnan(x)]
    if not v:
        return None, None
    return float(np.mean(v)), float(np.std(v))
