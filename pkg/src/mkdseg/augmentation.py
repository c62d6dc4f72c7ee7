"""Weak/strong image augmentation and CutMix mask algebra.

Every random function takes an explicit ``torch.Generator``; draws happen in a
fixed per-item order so a (seed, call order) pair pins the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .core import IGNORE, AugConfig, ValidationError

OPERATORS = ("color_jitter", "blur", "grayscale", "equalize", "solarize")


def _uniform(rng: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand((), generator=rng, dtype=torch.float64).item()


def _randint(rng: torch.Generator, high: int) -> int:
    """Uniform integer in [0, high)."""
    return int(torch.randint(high, (), generator=rng).item())


def downsample_nearest(t: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Nearest-neighbour subsample of a B x H x W map (any dtype) to h x w."""
    H, W = t.shape[-2:]
    if (H, W) == (h, w):
        return t
    rows = torch.arange(h) * H // h
    cols = torch.arange(w) * W // w
    return t[..., rows, :][..., cols]


# --- weak (geometric) augmentation ------------------------------------------


@dataclass(frozen=True)
class Geometry:
    """One image's flip / resize / pad / crop record."""

    flip: bool
    scale: float
    top: int
    left: int
    crop: tuple[int, int]

    def resized_size(self, h: int, w: int) -> tuple[int, int]:
        if self.scale == 1.0:
            return h, w
        return max(1, int(round(h * self.scale))), max(1, int(round(w * self.scale)))


def apply_geometry(t: torch.Tensor, geom: Geometry, label: bool = False) -> torch.Tensor:
    """Apply a geometry to one ``H x W x 3`` image or one ``H x W`` label map."""
    if label:
        plane = t.unsqueeze(0)  # 1 x H x W
    else:
        plane = t.permute(2, 0, 1)  # 3 x H x W
    if geom.flip:
        plane = plane.flip(-1)
    h, w = plane.shape[-2:]
    rh, rw = geom.resized_size(h, w)
    if (rh, rw) != (h, w):
        if label:
            plane = downsample_nearest(plane, rh, rw)
        else:
            plane = F.interpolate(plane.unsqueeze(0), size=(rh, rw), mode="bilinear",
                                  align_corners=False).squeeze(0).clamp(0, 1)
    ch, cw = geom.crop
    pad_h, pad_w = max(0, ch - rh), max(0, cw - rw)
    if pad_h or pad_w:
        fill = IGNORE if label else 0
        canvas = torch.full((plane.shape[0], rh + pad_h, rw + pad_w), fill, dtype=plane.dtype)
        canvas[:, :rh, :rw] = plane
        plane = canvas
    plane = plane[:, geom.top:geom.top + ch, geom.left:geom.left + cw]
    if label:
        return plane.squeeze(0)
    return plane.permute(1, 2, 0).contiguous()


def sample_geometry(h: int, w: int, crop: tuple[int, int], cfg: AugConfig,
                    rng: torch.Generator) -> Geometry:
    flip = bool(torch.rand((), generator=rng).item() < cfg.flip_prob)
    scale = _uniform(rng, *cfg.scale_range)
    rh, rw = Geometry(flip, scale, 0, 0, crop).resized_size(h, w)
    ph, pw = max(rh, crop[0]), max(rw, crop[1])
    top = _randint(rng, ph - crop[0] + 1)
    left = _randint(rng, pw - crop[1] + 1)
    return Geometry(flip, scale, top, left, tuple(crop))


ImagesLike = Union[torch.Tensor, Sequence[torch.Tensor]]


def weak_augment(x: ImagesLike, y: Optional[ImagesLike], crop: tuple[int, int],
                 cfg: AugConfig, rng: torch.Generator,
                 geometries: Optional[Sequence[Geometry]] = None):
    """Random flip, rescale and crop; the same geometry is applied to ``y``.

    ``x`` is a batch tensor or a list of differently sized ``H x W x 3`` images.
    Returns ``(images, labels or None, geometries)``.
    """
    n = len(x)
    if y is not None and len(y) != n:
        raise ValidationError("images and labels differ in batch size")
    if geometries is None:
        geometries = [sample_geometry(x[i].shape[0], x[i].shape[1], crop, cfg, rng)
                      for i in range(n)]
    images = torch.stack([apply_geometry(x[i], g) for i, g in enumerate(geometries)])
    labels = None
    if y is not None:
        for i in range(n):
            if tuple(y[i].shape) != tuple(x[i].shape[:2]):
                raise ValidationError(f"label {i} size {tuple(y[i].shape)} != image size")
        labels = torch.stack([apply_geometry(y[i], g, label=True) for i, g in enumerate(geometries)])
    return images, labels, list(geometries)


# --- strong (photometric) augmentation ----------------------------------------


def color_jitter(img: torch.Tensor, brightness: float, contrast: float,
                 saturation: float, hue: float) -> torch.Tensor:
    chw = img.permute(2, 0, 1)
    chw = TF.adjust_brightness(chw, brightness)
    chw = TF.adjust_contrast(chw, contrast)
    chw = TF.adjust_saturation(chw, saturation)
    chw = TF.adjust_hue(chw, hue)
    return chw.permute(1, 2, 0).clamp(0, 1)


def gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    h, w = img.shape[:2]
    k = 2 * math.ceil(3 * sigma) + 1
    # reflect padding needs the kernel radius below the image extent
    limit = 2 * (min(h, w) - 1) - 1
    if limit < 3:
        return img
    k = min(k, limit if limit % 2 else limit - 1)
    out = TF.gaussian_blur(img.permute(2, 0, 1), [k, k], [sigma, sigma])
    return out.permute(1, 2, 0).clamp(0, 1)


def grayscale(img: torch.Tensor) -> torch.Tensor:
    r, g, b = img.unbind(-1)
    gray = 0.299 * r + 0.587 * g + 0.114 * b
    return gray.unsqueeze(-1).expand_as(img).clamp(0, 1).contiguous()


def equalize(img: torch.Tensor) -> torch.Tensor:
    q = (img * 255).round().to(torch.uint8).permute(2, 0, 1)
    out = TF.equalize(q).permute(1, 2, 0)
    return out.to(img.dtype) / 255


def solarize(img: torch.Tensor, threshold: float) -> torch.Tensor:
    return torch.where(img > threshold, 1 - img, img)


def apply_operator(img: torch.Tensor, op: str, cfg: AugConfig, rng: torch.Generator) -> torch.Tensor:
    if op == "color_jitter":
        b = _uniform(rng, *cfg.jitter_range)
        c = _uniform(rng, *cfg.jitter_range)
        s = _uniform(rng, *cfg.jitter_range)
        h = _uniform(rng, *cfg.hue_range)
        return color_jitter(img, b, c, s, h)
    if op == "blur":
        return gaussian_blur(img, _uniform(rng, *cfg.blur_sigma))
    if op == "grayscale":
        return grayscale(img)
    if op == "equalize":
        return equalize(img)
    if op == "solarize":
        return solarize(img, _uniform(rng, *cfg.solarize_range))
    raise ValueError(f"unknown operator {op!r}")


def strong_augment(x: torch.Tensor, cfg: AugConfig, rng: torch.Generator,
                   ops: Optional[Sequence[str]] = None) -> torch.Tensor:
    """Apply one uniformly drawn photometric operator per image. Geometry is untouched."""
    out = []
    for i in range(x.shape[0]):
        op = OPERATORS[_randint(rng, len(OPERATORS))] if ops is None else ops[i]
        out.append(apply_operator(x[i], op, cfg, rng))
    return torch.stack(out)


# --- CutMix -----------------------------------------------------------------------


@dataclass(frozen=True)
class CutMixMask:
    """Binary B x H x W mask; item ``b`` is 1 exactly inside ``boxes[b]``."""

    m: torch.Tensor
    boxes: tuple[tuple[int, int, int, int], ...]  # (top, left, height, width)

    @classmethod
    def from_boxes(cls, boxes, H: int, W: int) -> "CutMixMask":
        m = torch.zeros(len(boxes), H, W, dtype=torch.bool)
        for b, (top, left, h, w) in enumerate(boxes):
            m[b, top:top + h, left:left + w] = True
        return cls(m, tuple(tuple(int(v) for v in box) for box in boxes))

    def at(self, h: int, w: int) -> torch.Tensor:
        """Mask resampled by nearest neighbour to ``h x w``."""
        return downsample_nearest(self.m, h, w)


def sample_cutmix_mask(B: int, H: int, W: int, rng: torch.Generator,
                       area: Optional[float] = None) -> CutMixMask:
    """One rectangle per item with area fraction ~ Beta(1, 1) unless ``area`` is forced."""
    if H < 2 or W < 2:
        raise ValidationError("CutMix needs H, W >= 2")
    boxes = []
    for _ in range(B):
        frac = torch.rand((), generator=rng, dtype=torch.float64).item() if area is None else area
        side = math.sqrt(frac)
        h, w = int(round(H * side)), int(round(W * side))
        top = _randint(rng, H - h + 1)
        left = _randint(rng, W - w + 1)
        boxes.append((top, left, h, w))
    return CutMixMask.from_boxes(boxes, H, W)


def _mix(a: torch.Tensor, b: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValidationError(f"cannot mix shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if m.shape != a.shape[:3]:
        raise ValidationError(f"mask shape {tuple(m.shape)} does not match {tuple(a.shape[:3])}")
    return torch.where(m.bool().unsqueeze(-1), b, a)


def apply_cutmix_images(x_i: torch.Tensor, x_j: torch.Tensor, mask: CutMixMask) -> torch.Tensor:
    """``(1 - m) * x_i + m * x_j`` as an exact per-pixel selection."""
    return _mix(x_i, x_j, mask.m)


def apply_cutmix_logits(p_i: torch.Tensor, p_j: torch.Tensor, mask: CutMixMask) -> torch.Tensor:
    h, w = p_i.shape[1:3]
    return _mix(p_i, p_j, mask.at(h, w))


def partner(t: torch.Tensor) -> torch.Tensor:
    """Batch item ``i`` mixes with item ``(i + 1) mod B``."""
    return torch.roll(t, shifts=-1, dims=0)
