"""Pivotal patch selection from class-token attention, plus baseline masks.

The location-wise strategy averages each layer's attention weights over
heads, takes the class-token row, fuses the per-layer vectors by
elementwise product (accumulated in the log domain so deep stacks cannot
underflow), keeps the top patches by fused importance, and zeroes the rest
of the image at pixel level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, ContractError
from .vit import AttentionStack, ViTConfig

__all__ = [
    "LOG_EPS",
    "FusedImportance",
    "PatchMask",
    "PixelMask",
    "kept_count",
    "extract_class_attention",
    "fuse_attention",
    "fuse_all",
    "select_pivotal",
    "baseline_mask",
    "expand_mask",
    "apply_mask",
    "mask_record",
]

LOG_EPS = 1e-12

_STRATEGIES = ("random", "grid", "border")


@dataclass
class FusedImportance:
    """Per-patch fused attention importance for one view, in log domain.

    Exponentiating reproduces the ordering of the direct product of the
    per-layer class-token attention vectors.
    """

    log_weights: np.ndarray
    view_index: int = 0

    def __post_init__(self):
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64)
        if self.log_weights.ndim != 1:
            raise ContractError(f"log_weights must be a vector, got shape {self.log_weights.shape}")
        if not np.isfinite(self.log_weights).all():
            raise ContractError("fused importance has non-finite entries")

    @property
    def num_patches(self) -> int:
        return self.log_weights.shape[0]


@dataclass
class PatchMask:
    """Keep/mask decision per patch.

    ``keep`` marks exactly K = max(1, round((1-r)*N)) patches. For the
    location-wise strategy ``threshold`` is the log-domain importance of
    the weakest kept patch; baseline strategies have no threshold.
    """

    keep: np.ndarray
    ratio: float
    threshold: float | None = None

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)

    @property
    def num_patches(self) -> int:
        return self.keep.shape[0]

    @property
    def kept(self) -> int:
        return int(self.keep.sum())

    @property
    def grid(self) -> np.ndarray:
        """Keep decisions arranged on the sqrt(N) x sqrt(N) patch grid."""
        n = self.num_patches
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ConfigError(f"patch count {n} is not a perfect square")
        return self.keep.reshape(side, side)

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)


@dataclass
class PixelMask:
    """Pixel-level {0,1} expansion of a PatchMask, shape (s, s)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)


def kept_count(ratio: float, num_patches: int) -> int:
    """K = max(1, round((1-r)*N)) with half-up rounding."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"masking ratio must lie in [0, 1), got {ratio}")
    return max(1, int(np.floor((1.0 - ratio) * num_patches + 0.5)))


def extract_class_attention(stack: AttentionStack) -> np.ndarray:
    """Per-layer class-token attention over patches, shape (L, B, N).

    Averages each layer's weights over heads, takes the class-token row,
    and drops the class->class entry.
    """
    if stack.num_layers == 0:
        raise ContractError("attention stack has no layers")
    return np.stack([stack.class_to_patch(layer) for layer in range(stack.num_layers)])


def fuse_attention(vectors, view_index: int = 0) -> FusedImportance:
    """Fuse per-layer attention vectors by elementwise product, in log domain."""
    if isinstance(vectors, np.ndarray):
        rows = [vectors] if vectors.ndim == 1 else list(vectors)
    else:
        rows = [np.asarray(v, dtype=np.float64) for v in vectors]
    lengths = {len(v) for v in rows}
    if len(lengths) != 1:
        raise ContractError(f"attention vectors disagree in length: {sorted(lengths)}")
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"expected (layers, patches) vectors, got shape {arr.shape}")
    if (arr < 0).any():
        raise ContractError("attention weights must be non-negative")
    log_weights = np.log(arr + LOG_EPS).sum(axis=0)
    return FusedImportance(log_weights=log_weights, view_index=view_index)


def fuse_all(stack: AttentionStack) -> list[FusedImportance]:
    """One FusedImportance per view in the batch."""
    per_layer = extract_class_attention(stack)  # (L, B, N)
    return [fuse_attention(per_layer[:, b, :], view_index=b) for b in range(per_layer.shape[1])]


def select_pivotal(fi: FusedImportance, ratio: float) -> PatchMask:
    """Keep the top-K patches by fused importance.

    Patches are reverse-sorted by log weight with ties broken by ascending
    patch index; the threshold is the weight of the weakest kept patch.
    When all weights are distinct this kept set equals {i : A_i >= A_t}.
    """
    n = fi.num_patches
    k = kept_count(ratio, n)
    order = np.argsort(-fi.log_weights, kind="stable")
    keep = np.zeros(n, dtype=bool)
    keep[order[:k]] = True
    threshold = float(fi.log_weights[order[k - 1]])
    return PatchMask(keep=keep, ratio=float(ratio), threshold=threshold)


def baseline_mask(kind: str, cfg: ViTConfig, ratio: float, rng: np.random.Generator) -> PatchMask:
    """Masks for the ablation strategies: random, grid, or border."""
    if kind not in _STRATEGIES:
        raise ConfigError(f"unknown baseline mask kind {kind!r}, expected one of {_STRATEGIES}")
    n = cfg.num_patches
    side = cfg.grid_size
    keep = np.zeros(n, dtype=bool)

    if kind == "random":
        k = kept_count(ratio, n)
        keep[rng.choice(n, size=k, replace=False)] = True
        return PatchMask(keep=keep, ratio=float(ratio))

    if kind == "grid":
        # One patch of every 2x2 tile, anchored top-left; implies r = 0.75
        # on even grids. The requested ratio is ignored.
        grid = np.zeros((side, side), dtype=bool)
        grid[::2, ::2] = True
        keep = grid.reshape(n)
        implied = 1.0 - keep.sum() / n
        return PatchMask(keep=keep, ratio=float(implied))

    # border: centered ceil(sqrt(K))-side square, clipped back to K by
    # removing outermost kept patches in raster order.
    k = kept_count(ratio, n)
    m = int(np.ceil(np.sqrt(k)))
    m = min(m, side)
    top = (side - m) // 2
    left = (side - m) // 2
    grid = np.zeros((side, side), dtype=bool)
    grid[top: top + m, left: left + m] = True
    excess = int(grid.sum()) - k
    if excess > 0:
        ring = [
            (i, j)
            for i in range(top, top + m)
            for j in range(left, left + m)
            if i in (top, top + m - 1) or j in (left, left + m - 1)
        ]
        for i, j in ring[:excess]:
            grid[i, j] = False
    keep = grid.reshape(n)
    return PatchMask(keep=keep, ratio=float(ratio))


def expand_mask(mask: PatchMask, cfg: ViTConfig) -> PixelMask:
    """Expand each grid entry into a patch_size x patch_size pixel block."""
    if mask.num_patches != cfg.num_patches:
        raise ConfigError(f"mask has {mask.num_patches} patches, config expects {cfg.num_patches}")
    grid = mask.grid.astype(np.float32)
    block = np.ones((cfg.patch_size, cfg.patch_size), dtype=np.float32)
    return PixelMask(values=np.kron(grid, block))


def apply_mask(mask: PatchMask, view: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """Zero masked patches of a (C, s, s) view; kept pixels are untouched."""
    expect = (cfg.channels, cfg.image_size, cfg.image_size)
    if view.shape != expect:
        raise ConfigError(f"view shape {tuple(view.shape)} does not match config {expect}")
    pixel = expand_mask(mask, cfg)
    return view * pixel.values[None, :, :]


def mask_record(mask: PatchMask, view_id: int) -> dict:
    """Sidecar record written next to each mask dump."""
    return {
        "view_id": int(view_id),
        "ratio": float(mask.ratio),
        "kept_indices": [int(i) for i in mask.kept_indices()],
        "A_t": None if mask.threshold is None else float(mask.threshold),
    }
