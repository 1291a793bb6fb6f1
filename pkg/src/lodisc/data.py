"""Dataset ingestion: image directories and a built-in synthetic generator.

Images are decoded, resized to the configured size, and normalized per
channel to zero mean and unit variance with dataset statistics computed
once and cached on the dataset. Synthetic images carry a ground-truth
foreground bitmask so attention-focus checks have a known target.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import rng as rng_mod
from .tensor import ConfigError

__all__ = ["SyntheticSpec", "Dataset", "DatasetError", "synthesize", "ingest",
           "write_ppm", "denormalize_to_rgb"]

_SHAPE_KINDS = ("square", "disc", "ring", "cross")

# Fill colors cycled per class; chosen to be far apart so classes stay
# distinguishable after normalization.
_PALETTE = (
    (0.90, 0.30, 0.25),
    (0.20, 0.45, 0.90),
    (0.25, 0.80, 0.35),
    (0.95, 0.75, 0.20),
    (0.70, 0.30, 0.85),
    (0.25, 0.80, 0.80),
)

_IMAGE_SUFFIXES = (".png", ".ppm")


class DatasetError(Exception):
    """The data source cannot be turned into a usable dataset."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for the synthetic shapes-over-noise dataset.

    Each class draws one filled shape kind at a random position over
    Gaussian background noise. ``distinct_classes=False`` gives every
    class the same shape kind and color, which makes labels carry no
    visual signal (useful as a chance-level control).
    """

    num_classes: int = 2
    images_per_class: int = 128
    image_size: int = 32
    shape_kinds: tuple[str, ...] = _SHAPE_KINDS
    noise_sigma: float = 0.15
    seed: int = 0
    distinct_classes: bool = True

    def __post_init__(self):
        if self.num_classes < 1 or self.images_per_class < 1:
            raise ConfigError("synthetic spec needs at least one class and one image per class")
        bad = set(self.shape_kinds) - set(_SHAPE_KINDS)
        if bad:
            raise ConfigError(f"unknown shape kinds {sorted(bad)}; known: {_SHAPE_KINDS}")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be at least 8, got {self.image_size}")


@dataclass
class Dataset:
    """Normalized images plus labels and cached normalization statistics."""

    images: np.ndarray                    # (M, C, s, s) float32, normalized
    labels: np.ndarray                    # (M,) int64
    class_names: list[str]
    mean: np.ndarray                      # (C,) float32, pre-normalization
    std: np.ndarray                       # (C,) float32
    foreground: np.ndarray | None = None  # (M, s, s) bool, synthetic only
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def stats(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean, self.std


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean (s, s) mask of one filled shape at a random position."""
    s = size
    yy, xx = np.mgrid[0:s, 0:s]
    half = rng.uniform(0.11 * s, 0.18 * s)
    margin = int(np.ceil(half)) + 1
    cy = rng.uniform(margin, s - 1 - margin)
    cx = rng.uniform(margin, s - 1 - margin)
    if kind == "square":
        return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    if kind == "disc":
        r = half * 1.13  # matches the square's area for the same draw
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "ring":
        r_out = half * 1.35
        r_in = half * 0.65
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r_out * r_out) & (d2 >= r_in * r_in)
    if kind == "cross":
        w = max(1.0, half * 0.45)
        arm = ((np.abs(yy - cy) <= w) & (np.abs(xx - cx) <= half * 1.4)) | (
            (np.abs(xx - cx) <= w) & (np.abs(yy - cy) <= half * 1.4))
        return arm
    raise ConfigError(f"unknown shape kind {kind!r}")


def _raw_synthetic(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
    gen = rng_mod.stream(spec.seed, "synthetic")
    s = spec.image_size
    total = spec.num_classes * spec.images_per_class
    images = np.empty((total, 3, s, s), dtype=np.float32)
    labels = np.empty(total, dtype=np.int64)
    foreground = np.empty((total, s, s), dtype=bool)
    i = 0
    for cls in range(spec.num_classes):
        if spec.distinct_classes:
            kind = spec.shape_kinds[cls % len(spec.shape_kinds)]
            color = np.array(_PALETTE[cls % len(_PALETTE)], dtype=np.float64)
        else:
            kind = spec.shape_kinds[0]
            color = np.array(_PALETTE[0], dtype=np.float64)
        for _ in range(spec.images_per_class):
            bg = 0.45 + gen.normal(0.0, spec.noise_sigma, size=(3, s, s))
            mask = _shape_mask(kind, s, gen)
            img = bg
            img[:, mask] = color[:, None]
            images[i] = np.clip(img, 0.0, 1.0).astype(np.float32)
            labels[i] = cls
            foreground[i] = mask
            i += 1
    names = [f"class{c}" for c in range(spec.num_classes)]
    return images, labels, foreground, names


def _normalize(images: np.ndarray, stats: tuple[np.ndarray, np.ndarray] | None):
    if stats is None:
        mean = images.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        std = images.std(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        std = np.maximum(std, np.float32(1e-6))
    else:
        mean, std = stats
        mean = np.asarray(mean, dtype=np.float32)
        std = np.asarray(std, dtype=np.float32)
    normed = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return normed.astype(np.float32), mean, std


def synthesize(spec: SyntheticSpec, stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    images, labels, foreground, names = _raw_synthetic(spec)
    normed, mean, std = _normalize(images, stats)
    return Dataset(images=normed, labels=labels, class_names=names,
                   mean=mean, std=std, foreground=foreground)


def _decode_image(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)  # (3, s, s)


def ingest_directory(root: str | Path, image_size: int,
                     stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """One subdirectory per class, PNG or binary PPM images inside.

    Unreadable files are skipped with a warning and reported on the
    dataset; an empty class is an error. Label ids follow lexicographic
    folder order.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class subdirectories under {root}")
    images, labels, skipped = [], [], []
    for cls_id, cls_dir in enumerate(class_dirs):
        files = sorted(p for p in cls_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
        count = 0
        for p in files:
            try:
                images.append(_decode_image(p, image_size))
            except Exception as exc:  # unreadable file: skip, keep going
                warnings.warn(f"skipping unreadable image {p}: {exc}")
                skipped.append(str(p))
                continue
            labels.append(cls_id)
            count += 1
        if count == 0:
            raise DatasetError(f"class directory {cls_dir} has no readable images")
    stacked = np.stack(images)
    normed, mean, std = _normalize(stacked, stats)
    ds = Dataset(images=normed, labels=np.asarray(labels, dtype=np.int64),
                 class_names=[d.name for d in class_dirs], mean=mean, std=std,
                 skipped=skipped)
    if skipped:
        warnings.warn(f"ingested {len(ds)} images, skipped {len(skipped)} unreadable files")
    return ds


def ingest(source, image_size: int = 32,
           stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Dispatch on source: SyntheticSpec or a class-per-subdirectory path."""
    if isinstance(source, SyntheticSpec):
        return synthesize(source, stats=stats)
    return ingest_directory(source, image_size, stats=stats)


def denormalize_to_rgb(dataset: Dataset, image: np.ndarray) -> np.ndarray:
    """Invert dataset normalization, returning (s, s, 3) uint8."""
    raw = image * dataset.std[:, None, None] + dataset.mean[:, None, None]
    raw = np.clip(raw, 0.0, 1.0)
    return (raw * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Write (h, w, 3) uint8 pixels as a binary PPM (P6)."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ConfigError(f"PPM writer needs (h, w, 3) pixels, got {rgb.shape}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
