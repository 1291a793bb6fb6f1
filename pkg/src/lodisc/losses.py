"""Contrastive losses: InfoNCE, the symmetric four-representation form,
and the combined global + local objective.

Representations are L2-normalized inside the loss, keys are detached
inside the loss, and the batch reduction is a mean, so loss magnitudes are
batch-size independent and gradients reach only the query tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, ContractError, Tensor, cross_entropy, l2_normalize, matmul

__all__ = ["LossConfig", "BranchOutputs", "info_nce", "symmetric_loss", "total_loss"]


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.2

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


@dataclass
class BranchOutputs:
    """The six per-step representations consumed by the combined loss."""

    z_q1: Tensor
    z_q2: Tensor
    z_k1: Tensor
    z_k2: Tensor
    z_l1: Tensor
    z_l2: Tensor

    def __post_init__(self):
        shapes = {t.data.shape for t in (self.z_q1, self.z_q2, self.z_k1, self.z_k2, self.z_l1, self.z_l2)}
        if len(shapes) != 1:
            raise ContractError(f"branch outputs disagree in shape: {sorted(shapes)}")


def info_nce(q: Tensor, k: Tensor, temperature: float) -> Tensor:
    """Mean InfoNCE over the batch; positives are same-index pairs.

    Returns mean_i of -log(exp(q_i.k_i / t) / sum_j exp(q_i.k_j / t)) on
    L2-normalized rows. A batch of one has no negatives and returns 0.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if q.data.ndim != 2 or k.data.ndim != 2:
        raise ContractError(f"expected (batch, dim) inputs, got {q.data.shape} and {k.data.shape}")
    if q.data.shape != k.data.shape:
        raise ContractError(f"query/key shapes disagree: {q.data.shape} vs {k.data.shape}")
    k = k.detach()
    qn = l2_normalize(q)
    kn = l2_normalize(k)
    logits = matmul(qn, kn.T) * (1.0 / temperature)
    labels = np.arange(q.data.shape[0])
    return cross_entropy(logits, labels)


def symmetric_loss(z_q1: Tensor, z_q2: Tensor, k1: Tensor, k2: Tensor, temperature: float) -> Tensor:
    """2t * InfoNCE(q1, k2) + 2t * InfoNCE(q2, k1)."""
    scale = 2.0 * temperature
    return info_nce(z_q1, k2, temperature) * scale + info_nce(z_q2, k1, temperature) * scale


def total_loss(b: BranchOutputs, temperature: float) -> tuple[Tensor, Tensor, Tensor]:
    """Combined objective: (total, global part, local part)."""
    loss_g = symmetric_loss(b.z_q1, b.z_q2, b.z_k1, b.z_k2, temperature)
    loss_l = symmetric_loss(b.z_q1, b.z_q2, b.z_l1, b.z_l2, temperature)
    return loss_g + loss_l, loss_g, loss_l
