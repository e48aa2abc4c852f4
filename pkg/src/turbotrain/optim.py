"""AdamW with cosine learning-rate annealing, over named numpy parameters."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class OptimizerConfig:
    lr: float = 0.002
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cosine: bool = True
    min_lr_ratio: float = 0.0


class AdamW:
    """Decoupled weight decay Adam; ``total_steps`` drives the cosine schedule."""

    def __init__(self, params: dict[str, np.ndarray], cfg: OptimizerConfig, total_steps: int):
        self.params = params
        self.cfg = cfg
        self.total_steps = max(int(total_steps), 1)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def lr_at(self, t: int) -> float:
        cfg = self.cfg
        if not cfg.cosine:
            return cfg.lr
        frac = min(t / self.total_steps, 1.0)
        lo = cfg.lr * cfg.min_lr_ratio
        return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * frac))

    def step(self, grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        lr = self.lr_at(self.t)
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        for k, g in grads.items():
            p = self.params[k]
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g
            p *= 1.0 - lr * cfg.weight_decay
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + cfg.eps)
