"""Query and momentum encoder assemblies.

f_q is backbone + projector + predictor and receives gradients. f_k is a
shape-identical backbone + projector whose parameters change only through
the momentum update; the local branch shares f_k. Inference features come
from f_q's backbone with the heads removed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MlpHead
from .tensor import ConfigError, ContractError, Tensor, no_grad
from .vit import AttentionStack, ViTBackbone, ViTConfig

__all__ = ["HeadConfig", "DualEncoder"]


@dataclass(frozen=True)
class HeadConfig:
    hidden_dim: int = 256
    out_dim: int = 64
    projection_layers: int = 3
    prediction_layers: int = 2

    def __post_init__(self):
        if not (self.hidden_dim >= self.out_dim >= 1):
            raise ConfigError(f"need hidden_dim >= out_dim >= 1, got {self.hidden_dim}/{self.out_dim}")
        if min(self.projection_layers, self.prediction_layers) < 1:
            raise ConfigError("heads need at least one layer each")


class DualEncoder:
    """Query encoder, momentum key encoder, and the momentum update rule."""

    def __init__(self, vit_cfg: ViTConfig, head_cfg: HeadConfig, momentum: float,
                 rng: np.random.Generator):
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {momentum}")
        self.vit_cfg = vit_cfg
        self.head_cfg = head_cfg
        self.momentum = float(momentum)

        d = vit_cfg.embed_dim
        self.backbone_q = ViTBackbone(vit_cfg, rng)
        self.projector_q = MlpHead(d, head_cfg.hidden_dim, head_cfg.out_dim, head_cfg.projection_layers, rng)
        self.predictor_q = MlpHead(head_cfg.out_dim, head_cfg.hidden_dim, head_cfg.out_dim,
                                   head_cfg.prediction_layers, rng)

        self.backbone_k = ViTBackbone(vit_cfg, rng)
        self.projector_k = MlpHead(d, head_cfg.hidden_dim, head_cfg.out_dim, head_cfg.projection_layers, rng)
        for pq, pk in zip(self._momentum_pairs_q(), self.key_params()):
            pk.data = pq.data.copy()
            pk.requires_grad = False

    # -- parameter plumbing ---------------------------------------------------

    def _momentum_pairs_q(self) -> list[Tensor]:
        """f_q parameters that have an f_k counterpart (no predictor)."""
        return self.backbone_q.params() + self.projector_q.params()

    def query_params(self) -> list[Tensor]:
        return self.backbone_q.params() + self.projector_q.params() + self.predictor_q.params()

    def key_params(self) -> list[Tensor]:
        return self.backbone_k.params() + self.projector_k.params()

    def named_query_params(self) -> list[tuple[str, Tensor]]:
        return (self.backbone_q.named_params("f_q.backbone")
                + self.projector_q.named_params("f_q.projector")
                + self.predictor_q.named_params("f_q.predictor"))

    def named_key_params(self) -> list[tuple[str, Tensor]]:
        return (self.backbone_k.named_params("f_k.backbone")
                + self.projector_k.named_params("f_k.projector"))

    # -- encoding ---------------------------------------------------------------

    def encode_query(self, views: Tensor) -> Tensor:
        """Prediction-head output (B, out_dim); participates in the tape."""
        return self.predictor_q(self.projector_q(self.backbone_q(views)))

    def encode_key(self, views: Tensor) -> Tensor:
        """Projection-head output (B, out_dim); detached from the tape."""
        with no_grad():
            return self.projector_k(self.backbone_k(views)).detach()

    def encode_key_with_attention(self, views: Tensor) -> tuple[Tensor, AttentionStack]:
        """Key embeddings plus the per-layer attention weights of the same pass."""
        with no_grad():
            emb, stack = self.backbone_k.forward(views, capture_attention=True)
            return self.projector_k(emb).detach(), stack

    # -- momentum ---------------------------------------------------------------

    def momentum_update(self) -> None:
        """Move every f_k parameter to beta*f_k + (1-beta)*f_q, elementwise.

        Computed as q + beta*(k - q), which keeps the result inside the
        closed interval between the old key value and the query value even
        in float32. beta = 1 and beta = 0 are exact no-op and copy.
        """
        q_params = self._momentum_pairs_q()
        k_params = self.key_params()
        if len(q_params) != len(k_params):
            raise ContractError(f"parameter lists misaligned: {len(q_params)} vs {len(k_params)}")
        beta = self.momentum
        for pq, pk in zip(q_params, k_params):
            if pq.data.shape != pk.data.shape:
                raise ContractError(
                    f"parameter shapes misaligned: {tuple(pq.data.shape)} vs {tuple(pk.data.shape)}")
            if beta == 1.0:
                continue
            if beta == 0.0:
                pk.data = pq.data.copy()
            else:
                pk.data = pq.data + pk.data.dtype.type(beta) * (pk.data - pq.data)
