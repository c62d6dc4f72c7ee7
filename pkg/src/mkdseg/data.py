"""Datasets, labeled/unlabeled partitions and a synthetic scene generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .core import IGNORE, ConfigError, ValidationError

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".ppm")


@dataclass
class SegDataset:
    """Images as uint8 ``H x W x 3`` arrays, labels as uint8 ``H x W`` or None.

    ``labeled`` holds the ids the current split treats as labeled; ``None``
    means no split has been made yet.
    """

    ids: list[str]
    images: list[np.ndarray]
    labels: list[Optional[np.ndarray]]
    num_classes: int
    labeled: Optional[frozenset] = None

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("dataset ids must be unique")
        if not (len(self.ids) == len(self.images) == len(self.labels)):
            raise ValidationError("ids, images and labels differ in length")
        for i, img, lab in zip(self.ids, self.images, self.labels):
            if lab is not None and lab.shape != img.shape[:2]:
                raise ValidationError(f"{i}: label size {lab.shape} != image size {img.shape[:2]}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def labeled_indices(self) -> list[int]:
        if self.labeled is None:
            return [i for i, lab in enumerate(self.labels) if lab is not None]
        return [i for i, k in enumerate(self.ids) if k in self.labeled]

    @property
    def unlabeled_indices(self) -> list[int]:
        chosen = set(self.labeled_indices)
        return [i for i in range(len(self)) if i not in chosen]

    def manifest(self) -> list[tuple[str, bool]]:
        chosen = set(self.labeled_indices)
        return [(k, i in chosen) for i, k in enumerate(self.ids)]

    def image_tensor(self, i: int, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.array(self.images[i]), dtype=dtype) / 255

    def label_tensor(self, i: int) -> torch.Tensor:
        return torch.from_numpy(self.labels[i].astype(np.int64))


# --- partitions ---------------------------------------------------------------


def make_partition(dataset: SegDataset, n: int, seed: int) -> SegDataset:
    """Label the first ``ceil(N / n)`` items of a seeded shuffle; the rest are unlabeled.

    Only items that have label maps are candidates for the labeled set.
    """
    candidates = [i for i, lab in enumerate(dataset.labels) if lab is not None]
    N = len(candidates)
    if n < 1:
        raise ValueError("denominator must be >= 1")
    if n > N:
        raise ValueError(f"denominator {n} exceeds the {N} labelable items")
    order = np.random.default_rng(seed).permutation(N)
    k = math.ceil(N / n)
    chosen = frozenset(dataset.ids[candidates[j]] for j in order[:k])
    return replace(dataset, labeled=chosen)


def write_manifest(dataset: SegDataset, path) -> None:
    lines = [f"{k}\t{'labeled' if lab else 'unlabeled'}" for k, lab in dataset.manifest()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[tuple[str, bool]]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in ("labeled", "unlabeled"):
            raise ValueError(f"{path}:{n}: expected 'id<TAB>labeled|unlabeled'")
        out.append((parts[0], parts[1] == "labeled"))
    if len({k for k, _ in out}) != len(out):
        raise ValueError(f"{path}: duplicate ids")
    return out


def apply_manifest(dataset: SegDataset, manifest: Sequence[tuple[str, bool]]) -> SegDataset:
    known = set(dataset.ids)
    missing = [k for k, _ in manifest if k not in known]
    if missing:
        raise ValueError(f"manifest names unknown ids, e.g. {missing[0]}")
    chosen = frozenset(k for k, lab in manifest if lab)
    by_id = dict(zip(dataset.ids, dataset.labels))
    unlabelable = [k for k in chosen if by_id[k] is None]
    if unlabelable:
        raise ValueError(f"manifest marks {unlabelable[0]} labeled but it has no label map")
    return replace(dataset, labeled=chosen)


# --- folders ----------------------------------------------------------------------


def load_folder_dataset(images_dir, labels_dir, num_classes: int) -> SegDataset:
    """Pair ``images_dir/<stem>.png`` with ``labels_dir/<stem>.png``; unpaired images are unlabeled."""
    images_dir = Path(images_dir)
    labels_dir = Path(labels_dir) if labels_dir is not None else None
    label_files = {}
    if labels_dir is not None and labels_dir.is_dir():
        label_files = {p.stem: p for p in labels_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    ids, images, labels = [], [], []
    for path in sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        img = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
        lab = None
        if path.stem in label_files:
            lpath = label_files[path.stem]
            with Image.open(lpath) as im:
                if im.mode not in ("L", "P"):
                    raise ValidationError(f"{lpath}: label must be single-channel, got mode {im.mode}")
                lab = np.asarray(im, dtype=np.uint8)
            if lab.shape != img.shape[:2]:
                raise ValidationError(f"{lpath}: label size {lab.shape} != image size {img.shape[:2]}")
            bad = (lab != IGNORE) & (lab >= num_classes)
            if bad.any():
                raise ValidationError(f"{lpath}: label value {int(lab[bad][0])} >= {num_classes}")
        ids.append(path.stem)
        images.append(img)
        labels.append(lab)
    return SegDataset(ids, images, labels, num_classes)


def load_dataset_dir(root, num_classes: int) -> SegDataset:
    root = Path(root)
    return load_folder_dataset(root / "images", root / "labels", num_classes)


def save_folder_dataset(dataset: SegDataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for k, img, lab in zip(dataset.ids, dataset.images, dataset.labels):
        Image.fromarray(img, mode="RGB").save(root / "images" / f"{k}.png")
        if lab is not None:
            Image.fromarray(lab, mode="L").save(root / "labels" / f"{k}.png")


# --- synthetic scenes --------------------------------------------------------------

SHAPE_KINDS = ("rectangle", "ellipse", "triangle")
TEXTURES = ("hstripes", "vstripes", "checker")


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Scenes of coloured shapes on a textured background.

    Class ``c >= 1`` is drawn as ``shape_kinds[(c - 1) % len(shape_kinds)]``
    with colour ``class_colors[c] + N(0, color_std)``; class 0 is background.
    ``illumination_std`` scales each image by a random per-channel gain.
    With ``random_colors`` every shape gets a uniform random colour, so only
    geometry identifies the class.  A non-empty ``textures`` fills class ``c``
    with the two-tone pattern ``textures[(c - 1) % len(textures)]`` whose
    period (pixels) is drawn from ``texture_period``.
    """

    height: int = 64
    width: int = 64
    num_classes: int = 4
    shapes_per_image: tuple[int, int] = (1, 4)
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    size_range: tuple[float, float] = (0.15, 0.45)
    class_colors: Optional[tuple[tuple[float, float, float], ...]] = None
    color_std: float = 0.08
    background_color: tuple[float, float, float] = (0.45, 0.45, 0.45)
    background_std: float = 0.1
    texture_scale: int = 8
    noise_std: float = 0.05
    illumination_std: float = 0.0
    random_colors: bool = False
    textures: tuple[str, ...] = ()
    texture_period: tuple[float, float] = (6.0, 10.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image", tuple(self.shapes_per_image))
        object.__setattr__(self, "shape_kinds", tuple(self.shape_kinds))
        object.__setattr__(self, "size_range", tuple(self.size_range))
        object.__setattr__(self, "background_color", tuple(self.background_color))
        object.__setattr__(self, "textures", tuple(self.textures))
        object.__setattr__(self, "texture_period", tuple(self.texture_period))
        if self.class_colors is not None:
            object.__setattr__(self, "class_colors", tuple(tuple(c) for c in self.class_colors))
        if self.num_classes < 2:
            raise ConfigError("num_classes", "need background plus at least one object class")
        if self.height < 2 or self.width < 2:
            raise ConfigError("height/width", "canvas must be at least 2x2")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ConfigError("shapes_per_image", "need 0 <= min <= max")
        for kind in self.shape_kinds:
            if kind not in SHAPE_KINDS:
                raise ConfigError("shape_kinds", f"unknown kind {kind!r}")
        if not self.shape_kinds:
            raise ConfigError("shape_kinds", "need at least one kind")
        for pattern in self.textures:
            if pattern not in TEXTURES:
                raise ConfigError("textures", f"unknown pattern {pattern!r}")
        if not 2 <= self.texture_period[0] <= self.texture_period[1]:
            raise ConfigError("texture_period", "need 2 <= min <= max")
        if not 0 < self.size_range[0] <= self.size_range[1] <= 1:
            raise ConfigError("size_range", "need 0 < min <= max <= 1")
        if self.class_colors is not None and len(self.class_colors) != self.num_classes:
            raise ConfigError("class_colors", "need one colour per class (index 0 unused)")
        for name in ("color_std", "background_std", "noise_std", "illumination_std"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.texture_scale < 1:
            raise ConfigError("texture_scale", "must be >= 1")

    def palette(self) -> np.ndarray:
        if self.class_colors is not None:
            return np.asarray(self.class_colors, dtype=np.float64)
        # evenly spaced hues at fixed saturation/value; row 0 is a placeholder for background
        hues = np.arange(self.num_classes - 1) / max(1, self.num_classes - 1)
        rgb = [_hsv_to_rgb(h, 0.6, 0.75) for h in hues]
        return np.asarray([self.background_color] + rgb, dtype=np.float64)


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    import colorsys

    return colorsys.hsv_to_rgb(h, s, v)


@dataclass(frozen=True)
class Shape:
    kind: str
    cls: int
    params: tuple  # rectangle: (top, left, h, w); ellipse: (cy, cx, ry, rx); triangle: 3 (y, x) vertices
    color: tuple[float, float, float]
    texture: Optional[tuple] = None  # (pattern, period, second colour)


def shape_mask(shape: Shape, H: int, W: int) -> np.ndarray:
    """Boolean coverage of pixel centres by ``shape``."""
    if shape.kind == "rectangle":
        top, left, h, w = (int(v) for v in shape.params)
        m = np.zeros((H, W), dtype=bool)
        m[max(top, 0):max(top + h, 0), max(left, 0):max(left + w, 0)] = True
        return m
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    if shape.kind == "ellipse":
        cy, cx, ry, rx = shape.params
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if shape.kind == "triangle":
        (y0, x0), (y1, x1), (y2, x2) = shape.params

        def edge(ya, xa, yb, xb):
            return (xb - xa) * (yy - ya) - (yb - ya) * (xx - xa)

        e0, e1, e2 = edge(y0, x0, y1, x1), edge(y1, x1, y2, x2), edge(y2, x2, y0, x0)
        return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def render_scene(shapes: Sequence[Shape], cfg: SyntheticSceneConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Rasterise ``shapes`` in order (later ones occlude) over a textured background."""
    H, W = cfg.height, cfg.width
    s = cfg.texture_scale
    coarse = rng.normal(0, cfg.background_std, size=(math.ceil(H / s) + 1, math.ceil(W / s) + 1, 3))
    texture = np.kron(coarse, np.ones((s, s, 1)))[:H, :W]
    img = np.asarray(cfg.background_color, dtype=np.float64) + texture
    label = np.zeros((H, W), dtype=np.uint8)
    yy, xx = np.mgrid[0:H, 0:W]
    for shape in shapes:
        m = shape_mask(shape, H, W)
        img[m] = shape.color
        if shape.texture is not None:
            pattern, period, second = shape.texture
            band_y = (yy // (period / 2)).astype(int) % 2 == 1
            band_x = (xx // (period / 2)).astype(int) % 2 == 1
            on = {"hstripes": band_y, "vstripes": band_x, "checker": band_y ^ band_x}[pattern]
            img[m & on] = second
        label[m] = shape.cls
    if cfg.illumination_std > 0:
        img = img * np.clip(rng.normal(1.0, cfg.illumination_std, size=3), 0.2, 2.0)
    if cfg.noise_std > 0:
        img = img + rng.normal(0, cfg.noise_std, size=img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8), label


def sample_shapes(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> list[Shape]:
    H, W = cfg.height, cfg.width
    palette = cfg.palette()
    lo, hi = cfg.shapes_per_image
    shapes = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        cls = int(rng.integers(1, cfg.num_classes))
        kind = cfg.shape_kinds[(cls - 1) % len(cfg.shape_kinds)]
        if cfg.random_colors:
            color = tuple(rng.uniform(0, 1, 3))
        else:
            color = tuple(np.clip(palette[cls] + rng.normal(0, cfg.color_std, 3), 0, 1))
        sh = rng.uniform(*cfg.size_range) * H
        sw = rng.uniform(*cfg.size_range) * W
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        if kind == "rectangle":
            params = (int(cy - sh / 2), int(cx - sw / 2), max(1, int(sh)), max(1, int(sw)))
        elif kind == "ellipse":
            params = (cy, cx, sh / 2, sw / 2)
        else:
            angle = rng.uniform(0, 2 * np.pi)
            r = max(sh, sw) / 2 * 1.2
            params = tuple((cy + r * np.sin(angle + k * 2 * np.pi / 3),
                            cx + r * np.cos(angle + k * 2 * np.pi / 3)) for k in range(3))
        texture = None
        if cfg.textures:
            pattern = cfg.textures[(cls - 1) % len(cfg.textures)]
            texture = (pattern, float(rng.uniform(*cfg.texture_period)), tuple(rng.uniform(0, 1, 3)))
        shapes.append(Shape(kind, cls, params, color, texture))
    return shapes


def generate_synthetic(cfg: SyntheticSceneConfig, count: int, prefix: str = "img") -> SegDataset:
    """``count`` scenes, fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    ids, images, labels = [], [], []
    width = max(4, len(str(count - 1)))
    for i in range(count):
        img, lab = render_scene(sample_shapes(cfg, rng), cfg, rng)
        ids.append(f"{prefix}{i:0{width}d}")
        images.append(img)
        labels.append(lab)
    return SegDataset(ids, images, labels, cfg.num_classes)


# --- batch sampling ---------------------------------------------------------------------


@dataclass
class BatchSampler:
    """Draws labeled and unlabeled index batches uniformly with replacement.

    With an empty unlabeled set every image doubles as an unlabeled sample.
    """

    dataset: SegDataset
    batch_labeled: int
    batch_unlabeled: int
    dtype: torch.dtype = torch.float32
    _lab: list = field(init=False)
    _unl: list = field(init=False)

    def __post_init__(self):
        self._lab = self.dataset.labeled_indices
        self._unl = self.dataset.unlabeled_indices or list(range(len(self.dataset)))
        if not self._lab:
            raise ValueError("dataset has no labeled items")

    def sample(self, rng: torch.Generator):
        from .trainer import Batch

        li = torch.randint(len(self._lab), (self.batch_labeled,), generator=rng).tolist()
        ui = torch.randint(len(self._unl), (self.batch_unlabeled,), generator=rng).tolist()
        ds = self.dataset
        x_l = [ds.image_tensor(self._lab[i], self.dtype) for i in li]
        y_l = [ds.label_tensor(self._lab[i]) for i in li]
        x_u = [ds.image_tensor(self._unl[i], self.dtype) for i in ui]
        return Batch(x_l, y_l, x_u)
