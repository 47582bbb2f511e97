"""Corpus discovery, labeling, checksumming, stratified splits and k-fold assignment."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path, PurePosixPath
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".jpeg", ".jpg", ".png"}


class DatasetError(RuntimeError):
    pass


class ClassLabel(str, Enum):
    NORMAL = "Normal"
    BACTERIAL = "Bacterial"
    VIRAL = "Viral"


class Scheme(str, Enum):
    NORMAL_VS_PNEUMONIA = "normal-vs-pneumonia"
    NORMAL_BACTERIAL_VIRAL = "normal-bacterial-viral"
    BACTERIAL_VS_VIRAL = "bacterial-vs-viral"

    @property
    def class_names(self) -> tuple[str, ...]:
        return _SCHEME_CLASSES[self]

    @property
    def positive_index(self) -> int:
        # binary schemes treat pneumonia (resp. viral) as the positive class
        return 1

    def class_of(self, label: ClassLabel) -> str | None:
        """Scheme class name for a corpus label, or None if the label is excluded."""
        if self is Scheme.NORMAL_VS_PNEUMONIA:
            return "Normal" if label is ClassLabel.NORMAL else "Pneumonia"
        if self is Scheme.BACTERIAL_VS_VIRAL and label is ClassLabel.NORMAL:
            return None
        return label.value

    def class_index(self, label: ClassLabel) -> int | None:
        name = self.class_of(label)
        return None if name is None else self.class_names.index(name)


_SCHEME_CLASSES = {
    Scheme.NORMAL_VS_PNEUMONIA: ("Normal", "Pneumonia"),
    Scheme.NORMAL_BACTERIAL_VIRAL: ("Normal", "Bacterial", "Viral"),
    Scheme.BACTERIAL_VS_VIRAL: ("Bacterial", "Viral"),
}

# Per-class test counts of the reference split of the public corpus, keyed by scheme class
REFERENCE_TEST_COUNTS = {
    Scheme.NORMAL_VS_PNEUMONIA: {"Normal": 205, "Pneumonia": 214},
    Scheme.NORMAL_BACTERIAL_VIRAL: {"Normal": 199, "Bacterial": 197, "Viral": 201},
    Scheme.BACTERIAL_VS_VIRAL: {"Bacterial": 197, "Viral": 201},
}


def default_labeling_rule(record_id: str) -> ClassLabel | None:
    """Label a file from its path relative to the dataset root.

    Anything below a ``NORMAL`` directory is Normal; below ``PNEUMONIA`` the
    file name decides (``bacteria`` or ``virus``). Returns None when no rule
    applies.
    """
    parts = PurePosixPath(record_id).parts
    dirs = {p.upper() for p in parts[:-1]}
    name = parts[-1].lower()
    if "NORMAL" in dirs:
        return ClassLabel.NORMAL
    if "PNEUMONIA" in dirs:
        if "bacteria" in name:
            return ClassLabel.BACTERIAL
        if "virus" in name:
            return ClassLabel.VIRAL
    return None


def sha256_file(path, block_size: int = 1 << 16) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(block_size), b""):
            h.update(block)
    return h.hexdigest()


@dataclass(frozen=True)
class ImageRecord:
    record_id: str
    label: ClassLabel
    content_hash: str

    def path(self, root) -> Path:
        return Path(root) / self.record_id


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    records: tuple[ImageRecord, ...]
    created_seed: int = 0
    label_errors: tuple[str, ...] = ()

    def __post_init__(self):
        ids = [r.record_id for r in self.records]
        if ids != sorted(ids):
            object.__setattr__(self, "records", tuple(sorted(self.records, key=lambda r: r.record_id)))
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate record_id in manifest")

    @property
    def class_counts(self) -> dict[ClassLabel, int]:
        c = Counter(r.label for r in self.records)
        return {label: c.get(label, 0) for label in ClassLabel}

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.record_id: r for r in self.records}

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "created_seed": self.created_seed,
            "class_counts": {k.value: v for k, v in self.class_counts.items()},
            "label_errors": list(self.label_errors),
            "records": [
                {"record_id": r.record_id, "label": r.label.value, "content_hash": r.content_hash}
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetManifest":
        records = tuple(
            ImageRecord(r["record_id"], ClassLabel(r["label"]), r["content_hash"]) for r in d["records"]
        )
        return cls(root=d["root"], records=records, created_seed=d.get("created_seed", 0),
                   label_errors=tuple(d.get("label_errors", ())))


@dataclass(frozen=True)
class SplitManifest:
    scheme: Scheme
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int
    test_fraction: float
    test_counts: dict[str, int] | None = None
    by_subject: bool = False

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "test_counts": self.test_counts,
            "by_subject": self.by_subject,
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitManifest":
        return cls(scheme=Scheme(d["scheme"]), train_ids=tuple(d["train_ids"]),
                   test_ids=tuple(d["test_ids"]), seed=d["seed"], test_fraction=d["test_fraction"],
                   test_counts=d.get("test_counts"), by_subject=d.get("by_subject", False))


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: dict[str, int]
    seed: int = 0

    def fold_ids(self, i: int) -> list[str]:
        return sorted(rid for rid, f in self.fold_of.items() if f == i)

    def train_ids_for(self, i: int) -> list[str]:
        return sorted(rid for rid, f in self.fold_of.items() if f != i)

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "fold_of": dict(sorted(self.fold_of.items()))}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FoldAssignment":
        return cls(k=d["k"], fold_of=dict(d["fold_of"]), seed=d.get("seed", 0))


@dataclass
class VerificationReport:
    missing: list[str] = field(default_factory=list)
    mismatched: list[str] = field(default_factory=list)
    unreadable: list[str] = field(default_factory=list)
    checked: int = 0

    @property
    def ok(self) -> bool:
        return not (self.missing or self.mismatched or self.unreadable)


# -- persistence ------------------------------------------------------------

def dump_json(obj: Mapping, path) -> None:
    """Write sorted-key JSON atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def save_manifest(m: DatasetManifest, path) -> None:
    dump_json(m.to_dict(), path)


def load_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_dict(load_json(path))


def save_split(s: SplitManifest, path) -> None:
    dump_json(s.to_dict(), path)


def load_split(path) -> SplitManifest:
    return SplitManifest.from_dict(load_json(path))


def save_folds(f: FoldAssignment, path) -> None:
    dump_json(f.to_dict(), path)


def load_folds(path) -> FoldAssignment:
    return FoldAssignment.from_dict(load_json(path))


# -- operations ---------------------------------------------------------------

def _image_files(root: Path) -> list[str]:
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = [d for d in dirnames if not d.startswith(".")]
        for name in filenames:
            if name.startswith(".") or Path(name).suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            found.append(Path(dirpath, name).relative_to(root).as_posix())
    return sorted(found)


def scan_dataset(root, rule: Callable[[str], ClassLabel | None] = default_labeling_rule,
                 workers: int = 4, seed: int = 0) -> DatasetManifest:
    """Catalogue every image below ``root`` with its label and SHA-256 digest.

    Files the labeling rule cannot place are excluded and reported in
    ``label_errors``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset not found or empty: {root}")
    files = _image_files(root)
    if not files:
        raise DatasetError(f"dataset not found or empty: {root}")

    labeled, errors = [], []
    for rid in files:
        label = rule(rid)
        if label is None:
            errors.append(rid)
        else:
            labeled.append((rid, label))
    if errors:
        log.warning("%d file(s) matched no labeling rule and were excluded", len(errors))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        hashes = list(pool.map(lambda item: sha256_file(root / item[0]), labeled))
    records = tuple(ImageRecord(rid, label, h) for (rid, label), h in zip(labeled, hashes))
    if not records:
        raise DatasetError(f"dataset not found or empty: no labelable images under {root}")
    return DatasetManifest(root=root.resolve().as_posix(), records=records, created_seed=seed,
                           label_errors=tuple(errors))


def verify_manifest(manifest: DatasetManifest, root=None) -> VerificationReport:
    base = Path(root if root is not None else manifest.root)
    report = VerificationReport()
    for r in manifest.records:
        report.checked += 1
        p = base / r.record_id
        if not p.exists():
            report.missing.append(r.record_id)
            continue
        try:
            digest = sha256_file(p)
        except OSError:
            report.unreadable.append(r.record_id)
            continue
        if digest != r.content_hash:
            report.mismatched.append(r.record_id)
    return report


_SUBJECT = re.compile(r"^(person\d+)_", re.IGNORECASE)


def subject_of(record_id: str) -> str:
    """Grouping key for subject-aware splits: the ``personN`` prefix, else the file itself."""
    m = _SUBJECT.match(PurePosixPath(record_id).name)
    return m.group(1).lower() if m else record_id


def _rng(seed: int, *salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, *salt])


def _largest_remainder(total: int, weights: Sequence[int]) -> list[int]:
    s = sum(weights)
    raw = [total * w / s for w in weights]
    out = [int(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - out[i]), i))
    for i in order[: total - sum(out)]:
        out[i] += 1
    return out


def eligible_records(manifest: DatasetManifest, scheme: Scheme) -> list[ImageRecord]:
    return [r for r in manifest.records if scheme.class_of(r.label) is not None]


def make_split(manifest: DatasetManifest, scheme: Scheme | str, test_fraction: float = 0.08,
               seed: int = 0, test_counts: Mapping[str, int] | None = None,
               by_subject: bool = False) -> SplitManifest:
    """Stratified train/test split of the records eligible for ``scheme``.

    Strata are the corpus labels. ``test_counts`` pins the number of test
    records per scheme class instead of using ``test_fraction``; a merged
    class (Pneumonia) is apportioned over its labels by size.
    """
    scheme = Scheme(scheme)
    if not 0 <= test_fraction < 1:
        raise DatasetError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    records = eligible_records(manifest, scheme)
    strata: dict[ClassLabel, list[str]] = defaultdict(list)
    for r in records:
        strata[r.label].append(r.record_id)
    for name in scheme.class_names:
        if not any(scheme.class_of(lab) == name for lab in strata):
            raise DatasetError(f"scheme class empty: {name}")

    labels = [lab for lab in ClassLabel if lab in strata]
    if test_counts is not None:
        n_test = {}
        for name in scheme.class_names:
            members = [lab for lab in labels if scheme.class_of(lab) == name]
            want = int(test_counts[name])
            if want > sum(len(strata[lab]) for lab in members):
                raise DatasetError(f"cannot draw {want} test records from class {name}")
            for lab, n in zip(members, _largest_remainder(want, [len(strata[lab]) for lab in members])):
                n_test[lab] = n
    else:
        n_test = {lab: int(np.floor(test_fraction * len(strata[lab]) + 0.5)) for lab in labels}

    test: list[str] = []
    for idx, lab in enumerate(ClassLabel):
        if lab not in strata:
            continue
        ids = sorted(strata[lab])
        rng = _rng(seed, idx)
        if by_subject:
            groups: dict[str, list[str]] = defaultdict(list)
            for rid in ids:
                groups[subject_of(rid)].append(rid)
            keys = sorted(groups)
            taken = 0
            for j in rng.permutation(len(keys)):
                if taken >= n_test[lab]:
                    break
                test += groups[keys[j]]
                taken += len(groups[keys[j]])
        else:
            test += [ids[j] for j in rng.permutation(len(ids))[: n_test[lab]]]
    test_set = set(test)
    train = sorted(r.record_id for r in records if r.record_id not in test_set)
    return SplitManifest(scheme=scheme, train_ids=tuple(train), test_ids=tuple(sorted(test_set)),
                         seed=seed, test_fraction=test_fraction,
                         test_counts=dict(test_counts) if test_counts is not None else None,
                         by_subject=by_subject)


def kfold(train_ids: Iterable[str], manifest: DatasetManifest, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Stratified k-fold assignment.

    Within each label the ids are shuffled and dealt round-robin; the dealing
    position carries over between labels so total fold sizes also stay within 1.
    """
    if k < 2:
        raise DatasetError(f"k must be >= 2, got {k}")
    labels = manifest.by_id()
    strata: dict[ClassLabel, list[str]] = defaultdict(list)
    for rid in train_ids:
        if rid not in labels:
            raise DatasetError(f"unknown record id {rid!r}")
        strata[labels[rid].label].append(rid)
    if not strata:
        raise DatasetError("no training records to fold")
    smallest = min(len(v) for v in strata.values())
    if k > smallest:
        raise DatasetError(f"k={k} exceeds the smallest class size ({smallest})")
    fold_of: dict[str, int] = {}
    pos = 0
    for idx, lab in enumerate(ClassLabel):
        ids = sorted(strata.get(lab, []))
        for j in _rng(seed, idx).permutation(len(ids)):
            fold_of[ids[j]] = pos % k
            pos += 1
    return FoldAssignment(k=k, fold_of=fold_of, seed=seed)


def scheme_labels(manifest: DatasetManifest, scheme: Scheme, ids: Iterable[str]) -> dict[str, int]:
    """Map record ids to their class index under ``scheme``."""
    by_id = manifest.by_id()
    out = {}
    for rid in ids:
        idx = scheme.class_index(by_id[rid].label)
        if idx is None:
            raise DatasetError(f"record {rid} is not part of scheme {scheme.value}")
        out[rid] = idx
    return out
