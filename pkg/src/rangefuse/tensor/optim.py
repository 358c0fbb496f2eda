"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from .nn import Parameter


@dataclass(frozen=True)
class WarmupCosine:
    """Linear warmup from 0 to ``peak`` then cosine decay to ``final``.

    Epochs are continuous, so per-iteration rates come from fractional
    epochs.
    """

    total_epochs: float = 80.0
    warmup_epochs: float = 4.0
    peak: float = 1e-3
    final: float = 1e-5

    def __post_init__(self):
        if self.total_epochs <= 0 or self.warmup_epochs < 0 or self.warmup_epochs > self.total_epochs:
            raise ConfigError("schedule needs 0 <= warmup_epochs <= total_epochs and total_epochs > 0")

    def lr_at(self, epoch: float) -> float:
        if epoch < 0 or epoch > self.total_epochs + 1e-9:
            raise ConfigError(f"epoch {epoch} outside schedule [0, {self.total_epochs}]")
        if self.warmup_epochs > 0 and epoch <= self.warmup_epochs:
            return self.peak * epoch / self.warmup_epochs
        span = self.total_epochs - self.warmup_epochs
        if span <= 0:
            return self.peak
        progress = min((epoch - self.warmup_epochs) / span, 1.0)
        return self.final + (self.peak - self.final) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    first: list[np.ndarray]
    second: list[np.ndarray]
    step: int = 0
    schedule: WarmupCosine = field(default_factory=WarmupCosine)
    weight_decay: float = 0.003


class AdamW:
    def __init__(
        self,
        params: Sequence[Parameter],
        schedule: WarmupCosine | None = None,
        weight_decay: float = 0.003,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.betas, self.eps = betas, eps
        self.state = OptimizerState(
            first=[np.zeros_like(p.data) for p in self.params],
            second=[np.zeros_like(p.data) for p in self.params],
            schedule=schedule or WarmupCosine(),
            weight_decay=weight_decay,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        """One update at learning rate ``lr``; parameters without a gradient
        are treated as having a zero gradient."""
        st = self.state
        st.step += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p, m, v in zip(self.params, st.first, st.second):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if lr == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1.0 - lr * st.weight_decay) - lr * update).astype(p.dtype, copy=False)


def adamw_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], opt: AdamW, epoch: float) -> float:
    """Functional wrapper: load ``grads`` into ``params`` and step at
    ``lr_at(epoch)``. Returns the learning rate used."""
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        p.grad = g
    lr = opt.state.schedule.lr_at(epoch)
    opt.step(lr)
    return lr
