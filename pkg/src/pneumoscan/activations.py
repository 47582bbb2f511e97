"""Convolutional activation extraction, normalization and montage rendering."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .modelzoo import ARCHITECTURES, Model, ModelError, check_batch, to_batch

LAYER_ALIASES = ("first_conv", "deep_conv")


@dataclass(frozen=True)
class ActivationMap:
    layer_id: str
    channels: np.ndarray  # C x h x w
    normalized: bool = False
    degenerate: tuple[int, ...] = field(default_factory=tuple)


def resolve_layer(model: Model, layer: str) -> str:
    arch = ARCHITECTURES[model.architecture]
    if layer == "first_conv":
        return arch.first_conv
    if layer == "deep_conv":
        return arch.deep_conv
    names = model.layer_names()
    if layer not in names:
        raise ModelError(f"unknown layer {layer!r}; valid: {', '.join(LAYER_ALIASES + tuple(names))}")
    return layer


@torch.no_grad()
def extract_activations(model: Model, image, layer: str = "first_conv") -> ActivationMap:
    """Raw output of ``layer`` for one preprocessed image (H x W x 3 or 3 x H x W)."""
    name = resolve_layer(model, layer)
    x = image if isinstance(image, torch.Tensor) else to_batch(image)
    if x.ndim == 3:
        x = x[None]
    x = x.to(torch.float32)
    check_batch(model, x)
    captured = {}

    def hook(_module, _inp, out):
        captured["out"] = out.detach().clone()

    handle = model.net.get_submodule(name).register_forward_hook(hook)
    was_training = model.net.training
    model.net.eval()
    try:
        model.net(x[:1])
    finally:
        handle.remove()
        model.net.train(was_training)
    return ActivationMap(layer_id=name, channels=captured["out"][0].to(torch.float64).numpy())


def normalize_map(m: ActivationMap) -> ActivationMap:
    """Rescale each channel to [0, 1]; constant channels become zero and are flagged."""
    c = m.channels
    lo = c.min(axis=(1, 2), keepdims=True)
    hi = c.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    flat = (span == 0).reshape(-1)
    out = np.where(span > 0, (c - lo) / np.where(span > 0, span, 1.0), 0.0)
    return replace(m, channels=out, normalized=True, degenerate=tuple(int(i) for i in np.nonzero(flat)[0]))


def strongest_channel(m: ActivationMap) -> int:
    """Channel with the largest L1 norm; ties resolve to the lowest index."""
    return int(np.argmax(np.abs(m.channels).sum(axis=(1, 2))))


def default_grid(n: int) -> tuple[int, int]:
    rows = max(1, int(math.floor(math.sqrt(n))))
    return rows, math.ceil(n / rows)


def _to_uint8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def render_montage(m: ActivationMap, rows: int, cols: int, out_path) -> Path:
    """Tile channels row-major into a grayscale image; extra channels beyond rows*cols are dropped."""
    if not m.normalized:
        m = normalize_map(m)
    n, h, w = m.channels.shape
    if n > rows * cols:
        warnings.warn(f"grid {rows}x{cols} holds {rows * cols} of {n} channels; rendering the first "
                      f"{rows * cols}", stacklevel=2)
    canvas = np.zeros((rows * h, cols * w), dtype=np.float64)
    for i in range(min(n, rows * cols)):
        r, c = divmod(i, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = m.channels[i]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(_to_uint8(canvas), mode="L").save(out_path)
    return out_path


def save_channel(m: ActivationMap, index: int, out_path) -> Path:
    if not m.normalized:
        m = normalize_map(m)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(_to_uint8(m.channels[index]), mode="L").save(out_path)
    return out_path


def write_activation_report(model: Model, image, record_id: str, out_dir, layer: str = "first_conv",
                            grid: tuple[int, int] | None = None) -> Path:
    """Write the montage, strongest-channel image and metadata for one image.

    Files land in ``<out>/<architecture>/<record_id>/``.
    """
    raw = extract_activations(model, image, layer)
    norm = normalize_map(raw)
    strongest = strongest_channel(raw)
    rows, cols = grid or default_grid(raw.channels.shape[0])
    target = Path(out_dir) / model.architecture / record_id
    render_montage(norm, rows, cols, target / f"{raw.layer_id}.montage.png")
    save_channel(norm, strongest, target / f"{raw.layer_id}.strongest.png")
    meta = {
        "architecture": model.architecture,
        "layer": raw.layer_id,
        "requested_layer": layer,
        "channels": int(raw.channels.shape[0]),
        "height": int(raw.channels.shape[1]),
        "width": int(raw.channels.shape[2]),
        "strongest_channel": strongest,
        "degenerate_channels": list(norm.degenerate),
        "grid": [rows, cols],
    }
    (target / f"{raw.layer_id}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return target
