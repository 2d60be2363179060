"""Pluggable backbone registry.

A backbone maps a (B, 3, H, W) image batch to a (B, feature_dim) feature
vector. The registry keeps construction seeded and names stable so
checkpoints can be reloaded against the architecture they were saved with.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import torch.nn as nn
from torchvision import models


@dataclass(frozen=True)
class BackboneSpec:
    factory: Callable[[], nn.Module]
    feature_dim: int
    # dotted submodule path whose output feeds class-activation mapping
    # (the last convolutional block); None falls back to the last Conv2d
    cam_layer: Optional[str] = None


_REGISTRY: dict[str, BackboneSpec] = {}


def register_backbone(name: str, factory: Callable[[], nn.Module],
                      feature_dim: int, cam_layer: Optional[str] = None) -> None:
    _REGISTRY[name] = BackboneSpec(factory, feature_dim, cam_layer)


def make_backbone(name: str) -> tuple[nn.Module, int]:
    spec = get_spec(name)
    return spec.factory(), spec.feature_dim


def get_spec(name: str) -> BackboneSpec:
    if name not in _REGISTRY:
        raise KeyError(
            f"unknown backbone {name!r}; registered: {sorted(_REGISTRY)}")
    return _REGISTRY[name]


def last_conv(module: nn.Module) -> Optional[nn.Module]:
    last = None
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            last = m
    return last


def _resnet(ctor, feature_dim):
    def factory():
        net = ctor(weights=None)
        net.fc = nn.Identity()
        return net
    return factory, feature_dim


class TinyConvNet(nn.Module):
    """Three stride-2 conv blocks plus global average pooling.

    Small enough for CPU test runs. Group normalization instead of batch
    normalization: tiny datasets leave batch running statistics too noisy,
    and group norm has no train/eval gap.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.block1 = self._block(3, w)
        self.block2 = self._block(w, 2 * w)
        self.block3 = self._block(2 * w, 4 * w)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = 4 * w

    @staticmethod
    def _block(cin, cout):
        return nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
            nn.GroupNorm(min(8, cout), cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        x = self.block3(self.block2(self.block1(x)))
        return self.pool(x).flatten(1)


register_backbone("resnet50", *_resnet(models.resnet50, 2048), cam_layer="layer4")
register_backbone("resnet18", *_resnet(models.resnet18, 512), cam_layer="layer4")
register_backbone("tiny", lambda: TinyConvNet(16), 64, cam_layer="block3")
register_backbone("tiny8", lambda: TinyConvNet(8), 32, cam_layer="block3")
