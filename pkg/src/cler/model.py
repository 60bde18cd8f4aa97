"""Split backbone: shared feature extractor, class head and pretext head.

The network is ``class_head(features(x))`` for classification and
``pretext_head(features(x))`` for the self-supervised task. Both heads are
built by the same factory and only differ in output width.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

CHECKPOINT_MAGIC = "CLER-CHECKPOINT"
CHECKPOINT_VERSION = 1

BACKBONES = ("tiny_cnn", "resnet18_like")


@dataclass
class ArchitectureConfig:
    num_classes: int
    pretext_classes: int = 0  # 0 disables the pretext head
    backbone: str = "tiny_cnn"
    in_channels: int = 3
    image_size: int = 32
    widths: tuple = (16, 32, 64)  # tiny_cnn: one width per conv block
    kernel_size: int = 3
    nf: int = 20  # resnet18_like base width
    input_mean: Optional[tuple] = None
    input_std: Optional[tuple] = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.backbone == "tiny_cnn" and len(self.widths) != 3:
            raise ConfigError("tiny_cnn needs exactly three block widths")
        if self.num_classes < 1 or self.pretext_classes < 0:
            raise ConfigError("invalid head widths")
        # split point: two pooled blocks before the heads
        if self.backbone == "tiny_cnn" and self.image_size < 8:
            raise ConfigError("tiny_cnn needs images of at least 8x8")


class ConvBlock(nn.Module):
    """conv -> batch norm -> ReLU -> 2x2 max pool."""

    def __init__(self, cin: int, cout: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel_size, padding=kernel_size // 2)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.max_pool2d(F.relu(self.bn(self.conv(x))), 2)


class ConvBN(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return self.bn(self.conv(x))


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = ConvBN(cin, cout, stride) if stride != 1 or cin != cout else nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Head(nn.Module):
    """Last backbone stage, global average pool and a linear projection."""

    def __init__(self, block: nn.Module, width: int, out_features: int):
        super().__init__()
        self.block = block
        self.fc = nn.Linear(width, out_features)

    def forward(self, x):
        x = self.block(x)
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


class Normalize(nn.Module):
    def __init__(self, mean, std, channels):
        super().__init__()
        mean = torch.zeros(channels) if mean is None else torch.as_tensor(mean, dtype=torch.float32)
        std = torch.ones(channels) if std is None else torch.as_tensor(std, dtype=torch.float32)
        self.register_buffer("mean", mean.view(1, -1, 1, 1))
        self.register_buffer("std", std.view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


def _build_tiny_cnn(cfg: ArchitectureConfig):
    w1, w2, w3 = cfg.widths
    k = cfg.kernel_size
    features = nn.Sequential(ConvBlock(cfg.in_channels, w1, k), ConvBlock(w1, w2, k))

    def head(out):
        return Head(ConvBlock(w2, w3, k), w3, out)

    return features, head


def _build_resnet18_like(cfg: ArchitectureConfig):
    nf = cfg.nf

    def stage(cin, cout, stride, blocks=2):
        layers = [BasicBlock(cin, cout, stride)] + [BasicBlock(cout, cout) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    stem = nn.Sequential()
    stem.add_module("conv", nn.Conv2d(cfg.in_channels, nf, 3, padding=1, bias=False))
    stem.add_module("bn", nn.BatchNorm2d(nf))
    stem.add_module("relu", nn.ReLU())
    # everything up to and including the second-last residual block
    features = nn.Sequential(stem, stage(nf, nf, 1), stage(nf, 2 * nf, 2), stage(2 * nf, 4 * nf, 2),
                             BasicBlock(4 * nf, 8 * nf, 2))

    def head(out):
        return Head(BasicBlock(8 * nf, 8 * nf), 8 * nf, out)

    return features, head


class SplitNetwork(nn.Module):
    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        self.config = config
        builder = _build_tiny_cnn if config.backbone == "tiny_cnn" else _build_resnet18_like
        self.normalize = Normalize(config.input_mean, config.input_std, config.in_channels)
        self.features, make_head = builder(config)
        self.class_head = make_head(config.num_classes)
        self.pretext_head = make_head(config.pretext_classes) if config.pretext_classes else None

    def _check_input(self, images):
        c, s = self.config.in_channels, self.config.image_size
        if images.dim() != 4 or images.shape[1] != c or images.shape[2] != s or images.shape[3] != s:
            raise ValueError(f"expected images of shape (N, {c}, {s}, {s}), got {tuple(images.shape)}")

    def extract(self, images):
        self._check_input(images)
        return self.features(self.normalize(images))

    def forward(self, images):
        return self.class_head(self.extract(images))

    forward_class = forward

    def forward_pretext(self, images):
        if self.pretext_head is None:
            raise RuntimeError("network was built without a pretext head")
        return self.pretext_head(self.extract(images))

    def parameter_groups(self) -> dict:
        """Trainable parameters tagged ``psi`` (features), ``phi`` (class head), ``xi`` (pretext head)."""
        groups = {"psi": dict(self.features.named_parameters(prefix="features")),
                  "phi": dict(self.class_head.named_parameters(prefix="class_head")),
                  "xi": {}}
        if self.pretext_head is not None:
            groups["xi"] = dict(self.pretext_head.named_parameters(prefix="pretext_head"))
        return groups

    def conv_layers(self, include_pretext: bool = False) -> list:
        """Names of convolutional layers, in forward order."""
        names = [n for n, m in self.named_modules() if isinstance(m, nn.Conv2d)]
        if not include_pretext:
            names = [n for n in names if not n.startswith("pretext_head")]
        return names


def build_network(config: ArchitectureConfig) -> SplitNetwork:
    return SplitNetwork(config)


def forward_class(net: SplitNetwork, images):
    return net.forward_class(images)


def forward_pretext(net: SplitNetwork, images):
    return net.forward_pretext(images)


def clone(net: SplitNetwork) -> SplitNetwork:
    return copy.deepcopy(net)


def _norm_name(conv_name: str) -> str:
    parent, _, leaf = conv_name.rpartition(".")
    bn_leaf = "bn" + leaf[len("conv"):]
    return f"{parent}.{bn_leaf}" if parent else bn_leaf


def drop_filters(net: SplitNetwork, layer: str, fraction: float, rng_seed=None):
    """Zero ``ceil(F * fraction)`` random output filters of conv ``layer``.

    The filters' weights and bias and the matching batch-norm affine
    parameters are zeroed, so the dropped channels output exactly zero.
    Works in place; returns ``(net, sorted dropped indices)``.
    """
    modules = dict(net.named_modules())
    conv = modules.get(layer)
    if not isinstance(conv, nn.Conv2d):
        raise ValueError(f"{layer!r} is not a convolutional layer")
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    n_filters = conv.out_channels
    count = math.ceil(n_filters * fraction)
    rng = np.random.default_rng(rng_seed)
    idx = np.sort(rng.choice(n_filters, size=count, replace=False)) if count else np.zeros(0, dtype=np.int64)
    sel = torch.as_tensor(idx, dtype=torch.long)
    with torch.no_grad():
        conv.weight[sel] = 0
        if conv.bias is not None:
            conv.bias[sel] = 0
        bn = modules.get(_norm_name(layer))
        if isinstance(bn, nn.BatchNorm2d):
            bn.weight[sel] = 0
            bn.bias[sel] = 0
    return net, idx.tolist()


def save_checkpoint(path, net: SplitNetwork, buffer=None, extra: Optional[dict] = None) -> None:
    """Write architecture, grouped parameters, running statistics and optional replay state."""
    params = {group: {name: p.detach().clone() for name, p in named.items()}
              for group, named in net.parameter_groups().items()}
    running = {name: b.detach().clone() for name, b in net.named_buffers()}
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "architecture": asdict(net.config),
        "parameters": params,
        "running_stats": running,
        "buffer": None if buffer is None else buffer.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple:
    """Returns ``(net, buffer_state_or_None, extra)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload['version']}")
    net = SplitNetwork(ArchitectureConfig(**payload["architecture"]))
    state = {}
    for named in payload["parameters"].values():
        state.update(named)
    state.update(payload["running_stats"])
    net.load_state_dict(state)
    return net, payload["buffer"], payload["extra"]
