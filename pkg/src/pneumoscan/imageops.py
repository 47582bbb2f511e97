"""Image loading, resizing, normalization and the fixed rotation/scale/translation augmentations.

Images are float64 arrays of shape (H, W, 3). Values are in [0, 1] until
:func:`normalize` is applied.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

TRANSFORMS = ("original", "rotated", "scaled", "translated")


class ImageError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessSpec:
    target_size: int = 224
    channel_mean: tuple[float, float, float] = IMAGENET_MEAN
    channel_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.target_size < 1:
            raise ConfigError("target_size must be positive")
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise ConfigError("channel_mean and channel_std need 3 values each")
        if any(s <= 0 for s in self.channel_std):
            raise ConfigError(f"channel_std must be strictly positive, got {self.channel_std}")


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_degrees: float = 315.0  # clockwise, i.e. 45 degrees counter-clockwise
    scale_factor: float = 1.10
    translate_x_frac: float = 0.10
    translate_y_frac: float = 0.10
    fill_value: float = 0.0
    target_per_class: int = 4500

    def __post_init__(self):
        if self.scale_factor <= 0:
            raise ConfigError("scale_factor must be > 0")
        if abs(self.translate_x_frac) >= 1 or abs(self.translate_y_frac) >= 1:
            raise ConfigError("translation fractions must lie in (-1, 1)")
        if not 0 <= self.fill_value <= 1:
            raise ConfigError("fill_value must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def load_image(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif im.mode in ("1", "L", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError, SyntaxError) as e:
        raise ImageError(f"cannot decode image {path}: {e}") from e
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageError(f"zero-dimension image {path}")
    return np.clip(arr, 0.0, 1.0)


def save_image(img: np.ndarray, path) -> None:
    """Write an image as 8-bit PNG (grayscale when all channels agree), atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if np.array_equal(q[:, :, 0], q[:, :, 1]) and np.array_equal(q[:, :, 0], q[:, :, 2]):
        out = PILImage.fromarray(q[:, :, 0], mode="L")
    else:
        out = PILImage.fromarray(q, mode="RGB")
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    out.save(tmp, format="PNG")
    os.replace(tmp, path)


def _resample(img: np.ndarray, h: int, w: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
    return out[0].numpy().transpose(1, 2, 0).copy()


def resize(img: np.ndarray, size: int) -> np.ndarray:
    """Stretch to size x size with bilinear interpolation (antialiased when shrinking)."""
    if size < 1:
        raise ImageError("size must be >= 1")
    if img.shape[0] == size and img.shape[1] == size:
        return img.copy()
    return _resample(img, size, size)


def normalize(img: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    std = np.asarray(spec.channel_std, dtype=np.float64)
    if np.any(std <= 0):
        raise ConfigError("channel_std must be strictly positive")
    return (img - np.asarray(spec.channel_mean, dtype=np.float64)) / std


def denormalize(img: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    return img * np.asarray(spec.channel_std) + np.asarray(spec.channel_mean)


def preprocess(img: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    return normalize(resize(img, spec.target_size), spec)


def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float) -> np.ndarray:
    """Bilinear lookup at fractional (ys, xs); samples off the grid blend towards ``fill``."""
    h, w, c = img.shape
    padded = np.full((h + 2, w + 2, c), fill, dtype=np.float64)
    padded[1:-1, 1:-1] = img
    # one-pixel fill border: coordinate -1 and h are pure fill
    py = np.clip(ys + 1.0, 0.0, h + 1.0)
    px = np.clip(xs + 1.0, 0.0, w + 1.0)
    y0 = np.minimum(np.floor(py).astype(np.int64), h)
    x0 = np.minimum(np.floor(px).astype(np.int64), w)
    wy = (py - y0)[..., None]
    wx = (px - x0)[..., None]
    top = padded[y0, x0] * (1 - wx) + padded[y0, x0 + 1] * wx
    bot = padded[y0 + 1, x0] * (1 - wx) + padded[y0 + 1, x0 + 1] * wx
    return top * (1 - wy) + bot * wy


def _cos_sin(degrees: float) -> tuple[float, float]:
    quarter = degrees / 90.0
    if quarter == round(quarter):
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(round(quarter)) % 4]
    r = math.radians(degrees)
    return math.cos(r), math.sin(r)


def rotate(img: np.ndarray, degrees: float, fill: float = 0.0) -> np.ndarray:
    """Rotate clockwise (as displayed, rows running downwards) about the image centre.

    Output keeps the input size; areas that map from outside the source are
    filled with ``fill``.
    """
    if degrees % 360 == 0:
        return img.copy()
    h, w = img.shape[:2]
    cos, sin = _cos_sin(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx,
                         indexing="ij")
    src_x = cos * xx + sin * yy + cx
    src_y = -sin * xx + cos * yy + cy
    return _sample_bilinear(img, src_y, src_x, fill)


def scale(img: np.ndarray, factor: float, fill: float = 0.0) -> np.ndarray:
    """Zoom about the centre, keeping the input size.

    Magnification resamples to ceil(factor * size) and centre-crops; reduction
    resamples to round(factor * size) and centre-pads with ``fill``.
    """
    if factor <= 0:
        raise ImageError("scale factor must be > 0")
    h, w = img.shape[:2]
    if factor == 1.0:
        return img.copy()
    if factor > 1:
        nh, nw = math.ceil(factor * h), math.ceil(factor * w)
        big = _resample(img, nh, nw)
        top, left = (nh - h) // 2, (nw - w) // 2
        return big[top:top + h, left:left + w].copy()
    nh, nw = int(round(factor * h)), int(round(factor * w))
    if nh < 1 or nw < 1:
        raise ImageError(f"scale factor {factor} leaves an empty image")
    small = _resample(img, nh, nw)
    out = np.full_like(img, fill)
    top, left = (h - nh) // 2, (w - nw) // 2
    out[top:top + nh, left:left + nw] = small
    return out


def translate(img: np.ndarray, dx_frac: float, dy_frac: float, fill: float = 0.0) -> np.ndarray:
    """Shift right by round(dx_frac * W) and down by round(dy_frac * H) pixels."""
    if abs(dx_frac) >= 1 or abs(dy_frac) >= 1:
        raise ImageError("translation fractions must lie in (-1, 1)")
    h, w = img.shape[:2]
    sx, sy = int(round(dx_frac * w)), int(round(dy_frac * h))
    out = np.full_like(img, fill)
    if abs(sx) >= w or abs(sy) >= h:
        return out
    src_y = slice(max(0, -sy), h - max(0, sy))
    dst_y = slice(max(0, sy), h - max(0, -sy))
    src_x = slice(max(0, -sx), w - max(0, sx))
    dst_x = slice(max(0, sx), w - max(0, -sx))
    out[dst_y, dst_x] = img[src_y, src_x]
    return out


def apply_transform(img: np.ndarray, transform: str, spec: AugmentationSpec) -> np.ndarray:
    if transform == "original":
        return img.copy()
    if transform == "rotated":
        return rotate(img, spec.rotation_degrees, spec.fill_value)
    if transform == "scaled":
        return scale(img, spec.scale_factor, spec.fill_value)
    if transform == "translated":
        return translate(img, spec.translate_x_frac, spec.translate_y_frac, spec.fill_value)
    raise ValueError(f"unknown transform {transform!r}")


# -- training-set expansion ---------------------------------------------------

@dataclass(frozen=True)
class AugmentedRecord:
    class_name: str
    source_id: str
    transform: str

    @property
    def aug_id(self) -> str:
        return f"{self.source_id}.{self.transform}"

    def cache_path(self, cache_dir) -> Path:
        return Path(cache_dir) / self.class_name / f"{self.source_id.replace('/', '__')}.{self.transform}.png"


@dataclass(frozen=True)
class AugmentedManifest:
    spec: AugmentationSpec
    seed: int
    records: tuple[AugmentedRecord, ...]
    source_hashes: Mapping[str, str] = field(default_factory=dict)
    work_size: int | None = None

    @property
    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.records:
            counts[r.class_name] = counts.get(r.class_name, 0) + 1
        return dict(sorted(counts.items()))

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "work_size": self.work_size,
            "class_counts": self.class_counts,
            "source_hashes": dict(sorted(self.source_hashes.items())),
            "records": [
                {"class": r.class_name, "source_id": r.source_id, "transform": r.transform}
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AugmentedManifest":
        return cls(spec=AugmentationSpec(**d["spec"]), seed=d["seed"],
                   records=tuple(AugmentedRecord(r["class"], r["source_id"], r["transform"])
                                 for r in d["records"]),
                   source_hashes=dict(d.get("source_hashes", {})), work_size=d.get("work_size"))


def expand_training_set(train_records: Mapping[str, str], spec: AugmentationSpec, seed: int = 0,
                        source_hashes: Mapping[str, str] | None = None) -> AugmentedManifest:
    """Grow every class to exactly ``spec.target_per_class`` entries.

    ``train_records`` maps record id to class name. Per class, full passes are
    emitted in the order original, rotated, scaled, translated, each pass over
    the originals sorted by id. The pass that crosses the target keeps a
    seeded subset of the sources. Targets below the class size subsample the
    originals the same way.
    """
    by_class: dict[str, list[str]] = {}
    for rid, name in train_records.items():
        by_class.setdefault(name, []).append(rid)
    if not by_class:
        raise ValueError("no training records to expand")
    target = spec.target_per_class
    smallest = min(len(v) for v in by_class.values())
    if target > len(TRANSFORMS) * smallest:
        need = math.ceil(target / len(TRANSFORMS))
        raise ValueError(f"target_per_class={target} unreachable: every class needs at least {need} "
                         f"originals, smallest has {smallest}")
    out: list[AugmentedRecord] = []
    for ci, name in enumerate(sorted(by_class)):
        ids = sorted(by_class[name])
        remaining = target
        for ti, transform in enumerate(TRANSFORMS):
            if remaining <= 0:
                break
            if remaining >= len(ids):
                chosen = ids
            else:
                rng = np.random.default_rng([seed, ci, ti])
                chosen = sorted(ids[j] for j in rng.permutation(len(ids))[:remaining])
            out += [AugmentedRecord(name, rid, transform) for rid in chosen]
            remaining -= len(chosen)
    return AugmentedManifest(spec=spec, seed=seed, records=tuple(out),
                             source_hashes=dict(source_hashes or {}))


def materialize(manifest: AugmentedManifest, source_root, cache_dir, work_size: int | None = None,
                previous: AugmentedManifest | None = None) -> AugmentedManifest:
    """Render every augmented record to ``<cache>/<class>/<source>.<transform>.png``.

    Sources are first resized to ``work_size`` (if given). A file is reused
    when it exists and ``previous`` recorded the same source digest and
    parameters for it.
    """
    cache_dir = Path(cache_dir)
    reusable = set()
    if previous is not None and previous.spec == manifest.spec and previous.work_size == work_size:
        for r in previous.records:
            h = previous.source_hashes.get(r.source_id)
            if h is not None and manifest.source_hashes.get(r.source_id) == h:
                reusable.add(r)
    by_source: dict[str, list[AugmentedRecord]] = {}
    for r in manifest.records:
        by_source.setdefault(r.source_id, []).append(r)
    written = 0
    for source_id in sorted(by_source):
        todo = [r for r in by_source[source_id]
                if not (r in reusable and r.cache_path(cache_dir).exists())]
        if not todo:
            continue
        img = load_image(Path(source_root) / source_id)
        if work_size is not None:
            img = resize(img, work_size)
        for r in todo:
            save_image(apply_transform(img, r.transform, manifest.spec), r.cache_path(cache_dir))
            written += 1
    log.info("materialized %d augmented images (%d reused)", written, len(manifest.records) - written)
    return AugmentedManifest(spec=manifest.spec, seed=manifest.seed, records=manifest.records,
                             source_hashes=manifest.source_hashes, work_size=work_size)
