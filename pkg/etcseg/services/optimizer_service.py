"""SGD with momentum and the poly learning-rate policy."""
from __future__ import annotations

from typing import Dict, Iterable, Tuple

import numpy as np

from etcseg.autodiff import Tensor


def poly_lr(t: int, lr0: float, total: int, power: float = 0.9) -> float:
    """lr0 * (1 - t/total)^power, zero from ``total`` on"""
    remaining = max(0.0, 1.0 - t / total)
    return lr0 * remaining ** power


class SGD:
    """Heavy-ball SGD: v <- m v + g; p <- p - lr v"""

    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], momentum: float = 0.9):
        self.params = dict(named_params)
        self.momentum = momentum
        self.buffers: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr: float):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            buf = self.buffers[name]
            buf *= self.momentum
            buf += p.grad
            p.data -= lr * buf

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def load_buffers(self, buffers: Dict[str, np.ndarray]):
        for name in self.buffers:
            self.buffers[name] = np.array(buffers[name], dtype=np.float64)
