from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_fraction * total_steps
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if warmup >= total_steps:
        return base_lr
    progress = (step - warmup) / (total_steps - warmup)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a dict of named parameters."""

    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], names, lr: float | None = None) -> None:
        """Update the named trainable params in place; all others stay untouched."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name in names:
            p = params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            if m.shape != p.data.shape or g.shape != p.data.shape:
                raise ShapeError(f"adamw: {name} param {p.data.shape}, grad {g.shape}, moment {m.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
