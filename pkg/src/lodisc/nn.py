"""Parameter-holding building blocks shared by the backbone and heads."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, gelu, layernorm, linear

__all__ = ["trunc_normal", "Linear", "LayerNorm", "MlpHead"]


def trunc_normal(rng: np.random.Generator, shape: tuple, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples with values beyond 2 std redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


class Linear:
    """Affine layer. ``init`` picks truncated-normal(0.02) weights (the
    transformer-projection convention) or uniform(+-1/sqrt(fan_in)) (the
    usual MLP-head convention)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "trunc"):
        if init == "trunc":
            w = trunc_normal(rng, (d_in, d_out))
        elif init == "fan_in":
            bound = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(np.float32)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def params(self) -> list[Tensor]:
        return [self.w] if self.b is None else [self.w, self.b]

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.w", self.w)]
        if self.b is not None:
            out.append((f"{prefix}.b", self.b))
        return out


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gamma, self.beta, self.eps)

    def params(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]


class MlpHead:
    """Stack of linear -> layernorm -> gelu blocks with a bare final linear.

    ``n_layers`` counts the linear layers, matching the usual projection
    and prediction head descriptions.
    """

    def __init__(self, d_in: int, d_hidden: int, d_out: int, n_layers: int, rng: np.random.Generator):
        if n_layers < 1:
            raise ValueError(f"head needs at least one layer, got {n_layers}")
        self.blocks: list[tuple[Linear, LayerNorm]] = []
        dim = d_in
        for _ in range(n_layers - 1):
            self.blocks.append((Linear(dim, d_hidden, rng, init="fan_in"), LayerNorm(d_hidden)))
            dim = d_hidden
        self.out = Linear(dim, d_out, rng, init="fan_in")

    def __call__(self, x: Tensor) -> Tensor:
        for lin, ln in self.blocks:
            x = gelu(ln(lin(x)))
        return self.out(x)

    def params(self) -> list[Tensor]:
        out = []
        for lin, ln in self.blocks:
            out.extend(lin.params())
            out.extend(ln.params())
        out.extend(self.out.params())
        return out

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, (lin, ln) in enumerate(self.blocks):
            out.extend(lin.named_params(f"{prefix}.block{i}.lin"))
            out.extend(ln.named_params(f"{prefix}.block{i}.ln"))
        out.extend(self.out.named_params(f"{prefix}.out"))
        return out
