"""Optimizers and learning-rate schedules for the training loop."""

from __future__ import annotations

import math

import numpy as np

from .tensor import ConfigError, ContractError, Tensor

__all__ = ["CosineSchedule", "SGD", "AdamW"]


class CosineSchedule:
    """Cosine annealing from lr_max at step 0 to lr_min at total_steps.

    Endpoints are exact and the schedule is monotone non-increasing in
    between; steps beyond total_steps clamp to lr_min.
    """

    def __init__(self, lr_max: float, lr_min: float, total_steps: int):
        if total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
        if lr_min > lr_max:
            raise ConfigError(f"lr_min {lr_min} exceeds lr_max {lr_max}")
        self.lr_max = float(lr_max)
        self.lr_min = float(lr_min)
        self.total_steps = int(total_steps)

    def lr(self, step: int) -> float:
        t = min(max(int(step), 0), self.total_steps)
        frac = t / self.total_steps
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * frac))


class _Optimizer:
    def __init__(self, params: list[Tensor], lr: float, weight_decay: float):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ContractError("optimizer received a parameter with requires_grad=False")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"missing grad for parameter of shape {tuple(p.data.shape)}")
            grads.append(p.grad)
        return grads


class SGD(_Optimizer):
    """SGD with optional momentum; weight decay is added to the gradient."""

    def __init__(self, params, lr: float = 0.1, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = float(momentum)
        self._buf = [np.zeros_like(p.data) for p in self.params] if self.momentum else None

    def step(self, lr: float | None = None) -> None:
        if lr is not None:
            self.lr = float(lr)
        grads = self._grads()
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self._buf is not None:
                self._buf[i] = self.momentum * self._buf[i] + g
                g = self._buf[i]
            p.data -= p.data.dtype.type(self.lr) * g
        self.step_count += 1


class AdamW(_Optimizer):
    """AdamW with decoupled weight decay."""

    def __init__(self, params, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.exp_avg = [np.zeros_like(p.data) for p in self.params]
        self.exp_avg_sq = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        if lr is not None:
            self.lr = float(lr)
        grads = self._grads()
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.exp_avg, self.exp_avg_sq):
            if self.weight_decay:
                p.data -= p.data.dtype.type(self.lr * self.weight_decay) * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bias1
            v_hat = v / bias2
            p.data -= p.data.dtype.type(self.lr) * m_hat / (np.sqrt(v_hat) + self.eps)
