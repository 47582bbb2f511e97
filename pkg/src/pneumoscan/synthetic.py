"""Synthetic brightness-separated data for smoke tests and determinism checks."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import imageops
from .trainer import TensorSet

# mean intensity per corpus class; any two are separable by brightness alone
LEVELS = {"Normal": 0.85, "Bacterial": 0.15, "Viral": 0.5}


def brightness_images(n: int, level: float, size: int, rng: np.random.Generator,
                      jitter: float = 0.05) -> np.ndarray:
    base = np.clip(level + rng.uniform(-jitter, jitter, size=(n, size, size, 1)), 0.0, 1.0)
    return np.repeat(base, 3, axis=3)


def brightness_set(size: int, n_per_class: int = 20, levels=(0.9, 0.1), seed: int = 0,
                   spec: imageops.PreprocessSpec | None = None) -> TensorSet:
    """Near-white class 0 versus near-black class 1 (or more levels), normalized."""
    spec = spec or imageops.PreprocessSpec(target_size=size)
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for cls, level in enumerate(levels):
        imgs.append(brightness_images(n_per_class, level, size, rng))
        labels += [cls] * n_per_class
    x = imageops.normalize(np.concatenate(imgs), spec).astype(np.float32)
    ids = [f"synthetic/{i:04d}" for i in range(len(labels))]
    return TensorSet(x, labels, ids)


def write_corpus(root, n_normal: int = 12, n_bacterial: int = 12, n_viral: int = 12,
                 size: int = 64, seed: int = 0) -> Path:
    """Write a tiny corpus in the public dataset's directory layout.

    Normal images go to ``chest_xray/NORMAL``; pneumonia images to
    ``chest_xray/PNEUMONIA`` named ``personN_bacteria_M.png`` /
    ``personN_virus_M.png``.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    normal = root / "chest_xray" / "NORMAL"
    pneu = root / "chest_xray" / "PNEUMONIA"
    for i, img in enumerate(brightness_images(n_normal, LEVELS["Normal"], size, rng)):
        imageops.save_image(img, normal / f"IM-{i:04d}-0001.png")
    for i, img in enumerate(brightness_images(n_bacterial, LEVELS["Bacterial"], size, rng)):
        imageops.save_image(img, pneu / f"person{i // 2}_bacteria_{i}.png")
    for i, img in enumerate(brightness_images(n_viral, LEVELS["Viral"], size, rng)):
        imageops.save_image(img, pneu / f"person{100 + i // 2}_virus_{i}.png")
    return root
