"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from etcseg.autodiff.tensor import Tensor, no_grad
from etcseg.errors import UsageError


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over all input entries of |analytic - numeric| / max(1, |analytic|)

    ``f`` is called with ``inputs`` and must return a single-element tensor.
    Every input is treated as differentiable for the duration of the check.
    """
    inputs = list(inputs)
    saved_flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    try:
        out = f(*inputs)
        if out.size != 1:
            raise UsageError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

        worst = 0.0
        with no_grad():
            for t, grad in zip(inputs, analytic):
                flat = t.data.reshape(-1)
                grad_flat = grad.reshape(-1)
                for idx in range(flat.size):
                    original = flat[idx]
                    flat[idx] = original + h
                    plus = f(*inputs).item()
                    flat[idx] = original - h
                    minus = f(*inputs).item()
                    flat[idx] = original
                    numeric = (plus - minus) / (2.0 * h)
                    error = abs(grad_flat[idx] - numeric) / max(1.0, abs(grad_flat[idx]))
                    worst = max(worst, error)
        return worst
    finally:
        for t, flag in zip(inputs, saved_flags):
            t.requires_grad = flag
            t.zero_grad()
