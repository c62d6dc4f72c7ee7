"""Small encoder-decoder segmentation network with an exposed linear head.

The network maps ``B x H x W x 3`` images to features ``f`` (``B x H/4 x W/4 x D``)
and logits ``w f + b`` through a 1x1 classifier, so the feature-augmentation
loss can reach ``(f, w, b)`` directly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, ValidationError, check_images

OUTPUT_STRIDE = 4
INPUT_MULTIPLE = 8


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple[int, int, int] = (16, 32, 64)
    feature_dim: int = 32
    num_classes: int = 4
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ConfigError("widths", "need three positive channel widths")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim", "must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes", "must be >= 2")
        if not 0 < self.bn_momentum <= 1:
            raise ConfigError("bn_momentum", "must be in (0, 1]")


class ModelOutput(NamedTuple):
    features: torch.Tensor  # B x h x w x D
    logits: torch.Tensor  # B x h x w x C


def _block(cin: int, cout: int, stride: int, momentum: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout, momentum=momentum),
        nn.ReLU(),
    )


class SegNet(nn.Module):
    """Three stride-2 conv blocks, one upsampling decoder block with a skip, 1x1 head."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        w1, w2, w3 = arch.widths
        m = arch.bn_momentum
        self.arch = arch
        self.enc1 = _block(3, w1, 2, m)
        self.enc2 = _block(w1, w2, 2, m)
        self.enc3 = _block(w2, w3, 2, m)
        self.dec = _block(w3 + w2, arch.feature_dim, 1, m)
        self.classifier = nn.Conv2d(arch.feature_dim, arch.num_classes, 1)

    @property
    def weight(self) -> torch.Tensor:
        """Classifier weights as a C x D matrix."""
        return self.classifier.weight.flatten(1)

    @property
    def bias(self) -> torch.Tensor:
        return self.classifier.bias

    def forward(self, x: torch.Tensor) -> ModelOutput:
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ValidationError(f"expected B x H x W x 3 input, got {tuple(x.shape)}")
        H, W = x.shape[1:3]
        if H % INPUT_MULTIPLE or W % INPUT_MULTIPLE:
            raise ValidationError(f"input size {H}x{W} must be a multiple of {INPUT_MULTIPLE}")
        z = x.permute(0, 3, 1, 2)
        z = self.enc1(z)
        skip = self.enc2(z)
        z = self.enc3(skip)
        z = F.interpolate(z, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        f = self.dec(torch.cat([z, skip], dim=1))
        p = self.classifier(f)
        return ModelOutput(f.permute(0, 2, 3, 1), p.permute(0, 2, 3, 1))


def init_model(arch: ArchConfig, rng: torch.Generator, dtype=torch.float32) -> SegNet:
    """Build a network whose initial weights are drawn from ``rng`` only."""
    model = SegNet(arch)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, nonlinearity="relu", generator=rng)
                if module.bias is not None:
                    module.bias.zero_()
        # small head so initial logits are not saturated
        model.classifier.weight.mul_(0.1)
    return model.to(dtype)


def clone_model(model: SegNet) -> SegNet:
    return copy.deepcopy(model)


def upsample_logits(p: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Bilinear (half-pixel centres) resize of channels-last logits to ``H x W``."""
    h, w = p.shape[1:3]
    if (h, w) == (H, W):
        return p
    if H < h or W < w:
        raise ValidationError("upsample_logits cannot shrink")
    out = F.interpolate(p.permute(0, 3, 1, 2), size=(H, W), mode="bilinear", align_corners=False)
    return out.permute(0, 2, 3, 1)


def pad_to_multiple(x: torch.Tensor, multiple: int = INPUT_MULTIPLE) -> torch.Tensor:
    H, W = x.shape[1:3]
    ph, pw = (-H) % multiple, (-W) % multiple
    if not (ph or pw):
        return x
    return F.pad(x.permute(0, 3, 1, 2), (0, pw, 0, ph), mode="replicate").permute(0, 2, 3, 1)


@torch.no_grad()
def predict(model: SegNet, x: torch.Tensor) -> torch.Tensor:
    """Evaluation-mode per-pixel class map at input resolution."""
    check_images(x)
    was_training = model.training
    model.eval()
    H, W = x.shape[1:3]
    padded = pad_to_multiple(x)
    logits = model(padded).logits
    logits = upsample_logits(logits, padded.shape[1], padded.shape[2])[:, :H, :W]
    model.train(was_training)
    return logits.argmax(-1)
