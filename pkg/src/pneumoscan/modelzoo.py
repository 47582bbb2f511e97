"""Pretrained backbones with a replaced classification head and a uniform forward interface."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torchvision.models as tvm
from filelock import FileLock

log = logging.getLogger(__name__)

WEIGHTS_ENV = "PNEUMOSCAN_WEIGHTS"


class ModelError(RuntimeError):
    pass


class AlexNet(nn.Module):
    """The original two-group AlexNet: 96 first-layer kernels of 11x11, stride 4, no padding.

    torchvision's ``alexnet`` is the later single-GPU variant (64 kernels,
    padding 2), whose first layer maps 227 px to 56 px instead of 55 px.
    Module names follow torchvision so the head is ``classifier.6``.
    """

    def __init__(self, num_classes: int = 1000, dropout: float = 0.5):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 96, kernel_size=11, stride=4),
            nn.ReLU(inplace=True),
            nn.LocalResponseNorm(5, alpha=1e-4, beta=0.75, k=1.0),
            nn.MaxPool2d(kernel_size=3, stride=2),
            nn.Conv2d(96, 256, kernel_size=5, padding=2, groups=2),
            nn.ReLU(inplace=True),
            nn.LocalResponseNorm(5, alpha=1e-4, beta=0.75, k=1.0),
            nn.MaxPool2d(kernel_size=3, stride=2),
            nn.Conv2d(256, 384, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(384, 384, kernel_size=3, padding=1, groups=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(384, 256, kernel_size=3, padding=1, groups=2),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=3, stride=2),
        )
        self.classifier = nn.Sequential(
            nn.Linear(256 * 6 * 6, 4096),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
            nn.Linear(4096, 4096),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
            nn.Linear(4096, num_classes),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(torch.flatten(self.features(x), 1))


@dataclass(frozen=True)
class _Arch:
    builder: str
    weights: str  # torchvision weights enum, or a state-dict file name expected in weights_dir()
    input_size: int
    head: str
    first_conv: str
    deep_conv: str

    @property
    def local_weights(self) -> bool:
        return self.weights.endswith(".pth")

    def build(self) -> nn.Module:
        if self.builder == "alexnet":
            return AlexNet()
        return getattr(tvm, self.builder)(weights=None)


ARCHITECTURES = {
    "alexnet": _Arch("alexnet", "alexnet_bvlc.pth", 227, "classifier.6", "features.0", "features.12"),
    "resnet18": _Arch("resnet18", "ResNet18_Weights", 224, "fc", "conv1", "layer4.1.conv2"),
    "densenet201": _Arch("densenet201", "DenseNet201_Weights", 224, "classifier", "features.conv0",
                         "features.denseblock4.denselayer32.conv2"),
    "squeezenet": _Arch("squeezenet1_1", "SqueezeNet1_1_Weights", 227, "classifier.1", "features.0",
                        "features.12.expand3x3"),
}


@dataclass(frozen=True)
class BackboneConfig:
    architecture: str
    num_classes: int = 2
    weights_source: str = "imagenet"  # "imagenet" or "none" (random init, offline use)
    head_init_seed: int = 0
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ModelError(f"unknown architecture {self.architecture!r}; "
                             f"choose from {sorted(ARCHITECTURES)}")
        if self.num_classes not in (2, 3):
            raise ModelError("num_classes must be 2 or 3")
        if self.weights_source not in ("imagenet", "none"):
            raise ModelError(f"unknown weights_source {self.weights_source!r}")

    @property
    def input_size(self) -> int:
        return ARCHITECTURES[self.architecture].input_size

    def to_dict(self) -> dict:
        return {**asdict(self), "input_size": self.input_size}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = {k: v for k, v in d.items() if k != "input_size"}
        return cls(**d)


class Model:
    """A torchvision network plus the config that produced it."""

    def __init__(self, net: nn.Module, config: BackboneConfig):
        self.net = net
        self.config = config

    @property
    def architecture(self) -> str:
        return self.config.architecture

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def input_size(self) -> int:
        return self.config.input_size

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def head(self) -> nn.Module:
        return self.net.get_submodule(ARCHITECTURES[self.architecture].head)

    def head_parameter_count(self) -> int:
        return sum(p.numel() for p in self.head().parameters())

    def layer_names(self) -> list[str]:
        return [name for name, _ in self.net.named_modules() if name]

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def weights_dir() -> Path:
    env = os.environ.get(WEIGHTS_ENV)
    if env:
        return Path(env)
    return Path(torch.hub.get_dir()) / "checkpoints"


def _weights_path(arch: _Arch) -> Path:
    if arch.local_weights:
        return weights_dir() / arch.weights
    return weights_dir() / Path(getattr(tvm, arch.weights).IMAGENET1K_V1.url).name


def _pretrained_state(arch: _Arch) -> dict:
    target = _weights_path(arch)
    if arch.local_weights:
        if not target.exists():
            raise ModelError(
                f"pretrained weights for {arch.builder} not found at {target}. The original two-group "
                f"AlexNet is not in torchvision's registry: convert the ImageNet-trained BVLC AlexNet to a "
                f"state dict with this module's parameter names and save it there (or point "
                f"{WEIGHTS_ENV} at its directory), or build with weights_source='none'.")
        return torch.load(target, map_location="cpu", weights_only=True)
    url = getattr(tvm, arch.weights).IMAGENET1K_V1.url
    target.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(target) + ".lock"):
        if not target.exists():
            try:
                torch.hub.download_url_to_file(url, str(target), progress=False)
            except Exception as e:  # network errors surface as many types
                raise ModelError(
                    f"pretrained weights for {arch.builder} are not cached and could not be fetched "
                    f"({e.__class__.__name__}). Download {url} and place it at {target} "
                    f"(or point {WEIGHTS_ENV} at a directory holding it), or build with "
                    f"weights_source='none'."
                ) from e
    return torch.load(target, map_location="cpu", weights_only=True)


def weights_available(architecture: str) -> bool:
    return _weights_path(ARCHITECTURES[architecture]).exists()


def _replace_head(net: nn.Module, arch: _Arch, num_classes: int, seed: int) -> None:
    parent_name, _, child = arch.head.rpartition(".")
    parent = net.get_submodule(parent_name) if parent_name else net
    old = getattr(parent, child) if not child.isdigit() else parent[int(child)]
    if isinstance(old, nn.Linear):
        new = nn.Linear(old.in_features, num_classes)
        fan_in = old.in_features
    else:
        new = nn.Conv2d(old.in_channels, num_classes, kernel_size=old.kernel_size)
        fan_in = old.in_channels * math.prod(old.kernel_size)
    g = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        new.weight.copy_(torch.rand(new.weight.shape, generator=g) * 2 * bound - bound)
        new.bias.zero_()
    if child.isdigit():
        parent[int(child)] = new
    else:
        setattr(parent, child, new)
    if hasattr(net, "num_classes"):
        net.num_classes = num_classes


def _vgg_style_init(net: nn.Module) -> None:
    # PyTorch's default init starves an un-normalized 8-layer ReLU stack of gradient at
    # lr=3e-4; this is the init torchvision uses for VGG
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0, 0.01)
            nn.init.zeros_(m.bias)


def build_model(cfg: BackboneConfig) -> Model:
    """Backbone initialised from ImageNet weights (or seeded random init), new head, all layers trainable."""
    arch = ARCHITECTURES[cfg.architecture]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.head_init_seed)
        net = arch.build()
        if cfg.weights_source == "none" and cfg.architecture == "alexnet":
            _vgg_style_init(net)
    if cfg.weights_source == "imagenet":
        net.load_state_dict(_pretrained_state(arch))
    _replace_head(net, arch, cfg.num_classes, cfg.head_init_seed)
    head_params = {id(p) for p in net.get_submodule(arch.head).parameters()}
    for p in net.parameters():
        p.requires_grad = not cfg.freeze_backbone or id(p) in head_params
    return Model(net, cfg)


def to_batch(images) -> torch.Tensor:
    """Accept N x H x W x 3 numpy arrays or N x 3 x H x W tensors; return float32 NCHW."""
    if isinstance(images, torch.Tensor):
        t = images
    else:
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    return t.to(torch.float32)


def check_batch(model: Model, batch: torch.Tensor) -> None:
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ModelError(f"expected a batch of shape N x 3 x H x W, got {tuple(batch.shape)}")
    s = model.input_size
    if batch.shape[0] and tuple(batch.shape[2:]) != (s, s):
        raise ModelError(f"input size mismatch: expected {s}x{s}, got {batch.shape[2]}x{batch.shape[3]}")


@torch.no_grad()
def predict_proba(model: Model, batch, chunk: int = 32) -> np.ndarray:
    """Softmax probabilities, one row per image, computed in inference mode."""
    x = to_batch(batch)
    check_batch(model, x)
    if x.shape[0] == 0:
        return np.zeros((0, model.num_classes))
    was_training = model.net.training
    model.net.eval()
    try:
        logits = torch.cat([model.net(x[i:i + chunk]) for i in range(0, x.shape[0], chunk)])
    finally:
        model.net.train(was_training)
    return torch.softmax(logits.to(torch.float64), dim=1).numpy()


def save_checkpoint(model: Model, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    torch.save({"architecture": model.architecture, "config": model.config.to_dict(),
                "state_dict": model.net.state_dict()}, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, architecture: str | None = None) -> Model:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        cfg = BackboneConfig.from_dict(payload["config"])
        state = payload["state_dict"]
    except Exception as e:
        raise ModelError(f"checkpoint unreadable: {path}") from e
    if architecture is not None and architecture != cfg.architecture:
        raise ModelError(f"architecture mismatch: checkpoint holds {cfg.architecture}, "
                         f"expected {architecture}")
    model = build_model(BackboneConfig(cfg.architecture, cfg.num_classes, "none", cfg.head_init_seed,
                                       cfg.freeze_backbone))
    model.config = cfg
    try:
        model.net.load_state_dict(state)
    except RuntimeError as e:
        raise ModelError(f"checkpoint unreadable: {path}: {e}") from e
    return model
