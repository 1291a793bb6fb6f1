"""Two-view augmentation: random resized crop, flip, jitter, grayscale.

Every view consumes a fixed number of random draws regardless of the
config, so the stream position after augmenting an image never depends on
which transforms fired. Identity settings (unit crop range, zero
probabilities, zero jitter) return the input bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError

__all__ = ["AugmentConfig", "augment"]


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_range: tuple[float, float] = (0.5, 1.0)
    flip_prob: float = 0.5
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"crop scales must satisfy 0 < min <= max <= 1, got {self.crop_scale_range}")
        for name in ("flip_prob", "grayscale_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.jitter_strength < 0:
            raise ConfigError(f"jitter_strength must be non-negative, got {self.jitter_strength}")


def _resize_bilinear(img: np.ndarray, out_size: int) -> np.ndarray:
    """(C, h, w) -> (C, out, out) with half-pixel-center bilinear sampling."""
    c, h, w = img.shape
    if (h, w) == (out_size, out_size):
        return img

    def _axis(n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        coords = (np.arange(out_size, dtype=np.float32) + 0.5) * (n_in / out_size) - 0.5
        coords = np.clip(coords, 0.0, n_in - 1.0)
        i0 = np.floor(coords).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (coords - i0).astype(np.float32)

    y0, y1, wy = _axis(h)
    x0, x1, wx = _axis(w)
    rows0, rows1 = y0[:, None], y1[:, None]
    cols0, cols1 = x0[None, :], x1[None, :]
    top = (1.0 - wx)[None, :] * img[:, rows0, cols0] + wx[None, :] * img[:, rows0, cols1]
    bot = (1.0 - wx)[None, :] * img[:, rows1, cols0] + wx[None, :] * img[:, rows1, cols1]
    out = (1.0 - wy)[None, :, None] * top + wy[None, :, None] * bot
    return out.astype(np.float32)


def _one_view(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    c, s, _ = image.shape
    scale = rng.uniform(cfg.crop_scale_range[0], cfg.crop_scale_range[1])
    side = int(np.floor(s * np.sqrt(scale) + 0.5))
    side = min(max(side, 1), s)  # clamp keeps the crop non-empty
    top = int(rng.integers(0, s - side + 1))
    left = int(rng.integers(0, s - side + 1))
    flip_u = rng.uniform()
    bright = rng.uniform(1.0 - cfg.jitter_strength, 1.0 + cfg.jitter_strength)
    contrast = rng.uniform(1.0 - cfg.jitter_strength, 1.0 + cfg.jitter_strength)
    gray_u = rng.uniform()

    out = image
    if side != s or top or left:
        out = out[:, top: top + side, left: left + side]
    out = _resize_bilinear(out, s)
    if flip_u < cfg.flip_prob:
        out = out[:, :, ::-1]
    if cfg.jitter_strength > 0.0:
        out = out * np.float32(bright)
        m = np.float32(out.mean())
        out = (out - m) * np.float32(contrast) + m
    if gray_u < cfg.grayscale_prob and c == 3:
        lum = (np.float32(0.299) * out[0] + np.float32(0.587) * out[1]
               + np.float32(0.114) * out[2])
        out = np.broadcast_to(lum, (c,) + lum.shape)
    return np.ascontiguousarray(out, dtype=np.float32)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independently sampled views of one (C, s, s) image."""
    return _one_view(image, cfg, rng), _one_view(image, cfg, rng)
