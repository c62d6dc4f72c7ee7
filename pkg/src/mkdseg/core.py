"""Shared tensor conventions and the training configuration.

All tensors crossing module boundaries are channels-last torch tensors:

* images  ``B x H x W x 3``, float in [0, 1]
* labels  ``B x H x W``, int64 class indices, ``IGNORE`` for unlabeled pixels
* logits  ``B x h x w x C``
* features ``B x h x w x D``
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import torch

IGNORE = 255


class ConfigError(ValueError):
    """A configuration field is out of range or malformed."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class ValidationError(ValueError):
    """A tensor violates its shape or value contract."""


def check_images(x: torch.Tensor) -> torch.Tensor:
    if x.ndim != 4 or x.shape[-1] != 3 or min(x.shape[:3]) < 1:
        raise ValidationError(f"image batch must be B x H x W x 3, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValidationError("image batch has non-finite values")
    if x.min() < 0 or x.max() > 1:
        raise ValidationError("image values must lie in [0, 1]")
    return x


def check_labels(y: torch.Tensor, num_classes: int) -> torch.Tensor:
    if y.ndim != 3:
        raise ValidationError(f"label map must be B x H x W, got {tuple(y.shape)}")
    if y.dtype.is_floating_point:
        raise ValidationError("label map must be an integer tensor")
    bad = (y != IGNORE) & ((y < 0) | (y >= num_classes))
    if bad.any():
        raise ValidationError(
            f"label values must be in [0, {num_classes}) or {IGNORE}, "
            f"found {int(y[bad][0])}"
        )
    return y


def check_logits(p: torch.Tensor) -> torch.Tensor:
    if p.ndim != 4:
        raise ValidationError(f"logits must be B x h x w x C, got {tuple(p.shape)}")
    if not torch.isfinite(p).all():
        raise ValidationError("logits have non-finite values")
    return p


def one_hot(labels: torch.Tensor, num_classes: int, dtype=torch.float64) -> torch.Tensor:
    """One-hot encode a label map; IGNORE pixels map to the zero vector."""
    check_labels(labels, num_classes)
    valid = labels != IGNORE
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    out = torch.nn.functional.one_hot(safe.long(), num_classes).to(dtype)
    return out * valid.unsqueeze(-1).to(dtype)


@dataclass(frozen=True)
class AugConfig:
    """Magnitudes for the weak/strong pipelines and the ablation switches."""

    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.5, 2.0)
    jitter_range: tuple[float, float] = (0.6, 1.4)
    hue_range: tuple[float, float] = (-0.1, 0.1)
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    solarize_range: tuple[float, float] = (0.5, 1.0)
    strong: bool = True
    cutmix: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        object.__setattr__(self, "jitter_range", tuple(self.jitter_range))
        object.__setattr__(self, "hue_range", tuple(self.hue_range))
        object.__setattr__(self, "blur_sigma", tuple(self.blur_sigma))
        object.__setattr__(self, "solarize_range", tuple(self.solarize_range))
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob", "must be in [0, 1]")
        for name in ("scale_range", "jitter_range", "hue_range", "blur_sigma", "solarize_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}", "lower bound exceeds upper bound")
        if self.scale_range[0] <= 0:
            raise ConfigError("scale_range", "scales must be positive")
        if self.blur_sigma[0] <= 0:
            raise ConfigError("blur_sigma", "sigma must be positive")
        if not (0 <= self.solarize_range[0] and self.solarize_range[1] <= 1):
            raise ConfigError("solarize_range", "thresholds must lie in [0, 1]")
        if not (-0.5 <= self.hue_range[0] and self.hue_range[1] <= 0.5):
            raise ConfigError("hue_range", "hue shift must lie in [-0.5, 0.5]")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.4
    alpha: float = 1.5
    beta: float = 1.0
    lambda0: float = 1.0
    tau: Optional[float] = None
    tau_on_ss: bool = False
    lr0: float = 0.01
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iters_max: int = 1000
    crop: tuple[int, int] = (64, 64)
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    num_classes: int = 4
    seed: int = 0
    full_covariance: bool = False
    # sigmoid ramp-up length for alpha and beta; 0 means full weight from step 0
    rampup_iters: int = 0
    aug: AugConfig = field(default_factory=AugConfig)

    def __post_init__(self):
        object.__setattr__(self, "crop", tuple(int(c) for c in self.crop))
        if isinstance(self.aug, dict):
            object.__setattr__(self, "aug", AugConfig(**self.aug))
        validate_config(self)

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _finite(name: str, value: float) -> None:
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
        raise ConfigError(name, f"must be a finite number, got {value!r}")


def validate_config(cfg: TrainConfig) -> TrainConfig:
    """Return ``cfg`` unchanged, or raise ``ConfigError`` naming the bad field."""
    for name in ("gamma", "alpha", "beta", "lambda0", "lr0", "lr_power", "momentum", "weight_decay"):
        _finite(name, getattr(cfg, name))
    if not 0 <= cfg.gamma <= 1:
        raise ConfigError("gamma", f"must be in [0, 1], got {cfg.gamma}")
    for name in ("alpha", "beta", "lambda0", "weight_decay"):
        if getattr(cfg, name) < 0:
            raise ConfigError(name, f"must be >= 0, got {getattr(cfg, name)}")
    if cfg.tau is not None:
        _finite("tau", cfg.tau)
        if not 0 <= cfg.tau <= 1:
            raise ConfigError("tau", f"must be in [0, 1] or null, got {cfg.tau}")
    if cfg.lr0 <= 0:
        raise ConfigError("lr0", f"must be > 0, got {cfg.lr0}")
    if cfg.lr_power <= 0:
        raise ConfigError("lr_power", f"must be > 0, got {cfg.lr_power}")
    if not 0 <= cfg.momentum < 1:
        raise ConfigError("momentum", f"must be in [0, 1), got {cfg.momentum}")
    for name in ("iters_max", "batch_labeled", "batch_unlabeled", "num_classes", "seed",
                 "rampup_iters"):
        value = getattr(cfg, name)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(name, f"must be an integer, got {value!r}")
    if cfg.iters_max < 1:
        raise ConfigError("iters_max", "must be >= 1")
    if cfg.rampup_iters < 0:
        raise ConfigError("rampup_iters", "must be >= 0")
    if cfg.batch_labeled < 1 or cfg.batch_unlabeled < 1:
        raise ConfigError("batch_labeled" if cfg.batch_labeled < 1 else "batch_unlabeled", "must be >= 1")
    if cfg.num_classes < 2:
        raise ConfigError("num_classes", "must be >= 2")
    if cfg.num_classes > IGNORE:
        raise ConfigError("num_classes", f"must be <= {IGNORE}")
    if len(cfg.crop) != 2 or min(cfg.crop) < 1:
        raise ConfigError("crop", f"must be (height, width) with positive entries, got {cfg.crop}")
    if not isinstance(cfg.aug, AugConfig):
        raise ConfigError("aug", "must be an AugConfig")
    return cfg
