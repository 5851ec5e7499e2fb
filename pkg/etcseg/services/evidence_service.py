"""Evidence -> Dirichlet quantities, and uncertainty weights for cross supervision.

Fields are channel-major: the class axis is third from the end, so a single
image is (K, H, W) and a batch is (B, K, H, W).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from etcseg.autodiff import Tensor, as_tensor, ops
from etcseg.errors import DimensionError, DomainError

CLASS_AXIS = -3


@dataclass(frozen=True)
class EvidenceField:
    """Nonnegative per-pixel evidence, shape (..., K, H, W)"""
    e: Tensor

    def __post_init__(self):
        if self.e.ndim < 3:
            raise DimensionError(f"evidence needs (..., K, H, W), got shape {self.e.shape}")
        if np.any(self.e.data < 0):
            raise DomainError("evidence must be nonnegative")

    @property
    def num_classes(self) -> int:
        return self.e.shape[CLASS_AXIS]

    @classmethod
    def from_array(cls, values) -> 'EvidenceField':
        return cls(Tensor(values))


@dataclass(frozen=True)
class DirichletField:
    evidence: Tensor
    alpha: Tensor
    strength: Tensor
    belief: Tensor
    uncertainty: Tensor
    prob: Tensor

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[CLASS_AXIS]

    @property
    def shape(self):
        return self.alpha.shape


def per_class(t: Tensor, num_classes: int) -> Tensor:
    """Repeat a (..., H, W) map across the class axis"""
    return ops.expand_along(t, CLASS_AXIS, num_classes)


def dirichlet_from_evidence(field: EvidenceField) -> DirichletField:
    e = field.e
    k = field.num_classes
    alpha = ops.add(e, 1.0)
    strength = ops.sum(alpha, axis=CLASS_AXIS)
    strength_k = per_class(strength, k)
    belief = ops.div(e, strength_k)
    prob = ops.div(alpha, strength_k)
    uncertainty = ops.div(as_tensor(np.full(strength.shape, float(k))), strength)
    return DirichletField(evidence=e, alpha=alpha, strength=strength, belief=belief,
                          uncertainty=uncertainty, prob=prob)


def dirichlet_from_array(evidence) -> DirichletField:
    return dirichlet_from_evidence(EvidenceField.from_array(evidence))


def uncertainty_weight(field: DirichletField) -> Tensor:
    """w = 1 - u per pixel, detached from the graph"""
    return Tensor(1.0 - field.uncertainty.data)
