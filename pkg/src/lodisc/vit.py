"""A small Vision Transformer that exposes every layer's attention weights.

The backbone patchifies an image, prepends a learned class token, adds
learned positional embeddings, and runs pre-norm transformer blocks.
Attention capture copies the post-softmax weights without touching the
forward computation, so embeddings are bit-identical with capture on or
off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import LayerNorm, Linear, trunc_normal
from .tensor import (
    ConfigError,
    ContractError,
    DimensionError,
    Tensor,
    broadcast_to,
    concat,
    gelu,
    matmul,
    softmax,
)

__all__ = ["ViTConfig", "AttentionStack", "patchify", "patchify_batch", "ViTBackbone"]


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if min(self.image_size, self.patch_size, self.channels, self.embed_dim, self.layers, self.heads) < 1:
            raise ConfigError("all ViT dimensions must be positive")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def seq_len(self) -> int:
        return 1 + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass
class AttentionStack:
    """Post-softmax attention weights for one batch, one array per layer.

    Each entry has shape (B, H, 1+N, 1+N); rows are softmax outputs, so
    they are non-negative and sum to one.
    """

    layers: list[np.ndarray] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def batch_size(self) -> int:
        return self.layers[0].shape[0]

    def head_mean(self, layer: int) -> np.ndarray:
        """Head-averaged weights, shape (B, 1+N, 1+N)."""
        return self.layers[layer].mean(axis=1)

    def class_to_patch(self, layer: int) -> np.ndarray:
        """Head-averaged class-token row without the class->class entry, shape (B, N)."""
        return self.head_mean(layer)[:, 0, 1:]


def patchify_batch(images: Tensor, cfg: ViTConfig) -> Tensor:
    """(B, C, s, s) -> (B, N, p*p*C) in raster order, one row per patch."""
    b = images.data.shape[0]
    expect = (b, cfg.channels, cfg.image_size, cfg.image_size)
    if images.data.shape != expect:
        raise DimensionError(f"image batch shape {tuple(images.data.shape)} does not match config {expect}")
    g, p, c = cfg.grid_size, cfg.patch_size, cfg.channels
    x = images.reshape(b, c, g, p, g, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)          # (B, g, g, C, p, p)
    return x.reshape(b, cfg.num_patches, cfg.patch_dim)


def patchify(image: Tensor, cfg: ViTConfig) -> Tensor:
    """(C, s, s) -> (N, p*p*C); row i is the row-major flattening of patch i."""
    expect = (cfg.channels, cfg.image_size, cfg.image_size)
    if image.data.shape != expect:
        raise DimensionError(f"image shape {tuple(image.data.shape)} does not match config {expect}")
    return patchify_batch(image.reshape(1, *expect), cfg)[0]


class _Block:
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, cfg.mlp_dim, rng)
        self.fc2 = Linear(cfg.mlp_dim, d, rng)

    def params(self) -> list[Tensor]:
        out = []
        for m in (self.ln1, self.qkv, self.proj, self.ln2, self.fc1, self.fc2):
            out.extend(m.params())
        return out

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for name, m in (("ln1", self.ln1), ("qkv", self.qkv), ("proj", self.proj),
                        ("ln2", self.ln2), ("fc1", self.fc1), ("fc2", self.fc2)):
            out.extend(m.named_params(f"{prefix}.{name}"))
        return out


class ViTBackbone:
    """Patch embedding + class token + pre-norm transformer blocks."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch = Linear(cfg.patch_dim, d, rng)
        self.cls = Tensor(trunc_normal(rng, (1, 1, d)), requires_grad=True)
        self.pos = Tensor(trunc_normal(rng, (1, cfg.seq_len, d)), requires_grad=True)
        self.blocks = [_Block(cfg, rng) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(d)

    def forward(self, views: Tensor, capture_attention: bool = False) -> tuple[Tensor, AttentionStack | None]:
        """Class-token embeddings (B, D) plus optionally all attention weights."""
        cfg = self.cfg
        b = views.data.shape[0]
        if b < 1:
            raise ContractError("forward needs at least one view")
        x = patchify_batch(views, cfg)
        x = self.patch(x)
        cls = broadcast_to(self.cls, (b, 1, cfg.embed_dim))
        x = concat([cls, x], axis=1)
        x = x + self.pos

        stack = AttentionStack() if capture_attention else None
        scale = 1.0 / np.sqrt(cfg.head_dim)
        t, h, hd = cfg.seq_len, cfg.heads, cfg.head_dim
        for blk in self.blocks:
            y = blk.ln1(x)
            qkv = blk.qkv(y)
            q = qkv[:, :, : cfg.embed_dim].reshape(b, t, h, hd).transpose(0, 2, 1, 3)
            k = qkv[:, :, cfg.embed_dim: 2 * cfg.embed_dim].reshape(b, t, h, hd).transpose(0, 2, 1, 3)
            v = qkv[:, :, 2 * cfg.embed_dim:].reshape(b, t, h, hd).transpose(0, 2, 1, 3)
            scores = matmul(q, k.transpose(0, 1, 3, 2)) * scale
            attn = softmax(scores, axis=-1)
            if stack is not None:
                stack.layers.append(attn.data.copy())
            o = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, cfg.embed_dim)
            x = x + blk.proj(o)
            x = x + blk.fc2(gelu(blk.fc1(blk.ln2(x))))

        x = self.ln_f(x)
        return x[:, 0, :], stack

    def __call__(self, views: Tensor) -> Tensor:
        return self.forward(views)[0]

    def params(self) -> list[Tensor]:
        out = self.patch.params() + [self.cls, self.pos]
        for blk in self.blocks:
            out.extend(blk.params())
        out.extend(self.ln_f.params())
        return out

    def named_params(self, prefix: str = "backbone") -> list[tuple[str, Tensor]]:
        out = self.patch.named_params(f"{prefix}.patch")
        out.append((f"{prefix}.cls", self.cls))
        out.append((f"{prefix}.pos", self.pos))
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named_params(f"{prefix}.block{i}"))
        out.extend(self.ln_f.named_params(f"{prefix}.ln_f"))
        return out
