"""Dempster-Shafer combination of two evidential branches.

The fused opinion is pseudo supervision, so everything here runs on raw
arrays and never touches the autodiff graph.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from etcseg.errors import DimensionError
from etcseg.services.evidence_service import CLASS_AXIS, DirichletField, dirichlet_from_array

logger = logging.getLogger(__name__)

TOTAL_CONFLICT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class FusedDirichlet:
    belief_fuse: np.ndarray
    u_fuse: np.ndarray
    e_fuse: np.ndarray
    alpha_fuse: np.ndarray
    prob_fuse: np.ndarray
    conflict: np.ndarray
    conflict_overflow: int = 0

    @property
    def num_classes(self) -> int:
        return self.belief_fuse.shape[CLASS_AXIS]


def _masses(field):
    if isinstance(field, DirichletField):
        return field.belief.data, field.uncertainty.data
    return field


def ds_combine(d1: DirichletField, d2: DirichletField) -> FusedDirichlet:
    b1, u1 = _masses(d1)
    b2, u2 = _masses(d2)
    if b1.shape != b2.shape:
        raise DimensionError(f"ds_combine: shape mismatch {b1.shape} vs {b2.shape}")
    k = b1.shape[CLASS_AXIS]

    # ordered pairs k != j: (sum b1)(sum b2) - sum_k b1_k b2_k
    conflict = b1.sum(axis=CLASS_AXIS) * b2.sum(axis=CLASS_AXIS) - (b1 * b2).sum(axis=CLASS_AXIS)
    normalizer = 1.0 - conflict
    overflow = normalizer < TOTAL_CONFLICT_TOLERANCE
    safe = np.where(overflow, 1.0, normalizer)

    u1_k = np.expand_dims(u1, CLASS_AXIS)
    u2_k = np.expand_dims(u2, CLASS_AXIS)
    belief = (b1 * b2 + b1 * u2_k + b2 * u1_k) / np.expand_dims(safe, CLASS_AXIS)
    u_fuse = u1 * u2 / safe
    overflow_count = int(overflow.sum())
    if overflow_count:
        belief = np.where(np.expand_dims(overflow, CLASS_AXIS), 0.0, belief)
        u_fuse = np.where(overflow, 1.0, u_fuse)
        logger.warning(f"Total conflict at {overflow_count} pixel(s); vacuous opinion used there")

    evidence = k * belief / np.expand_dims(u_fuse, CLASS_AXIS)
    alpha = evidence + 1.0
    prob = alpha / alpha.sum(axis=CLASS_AXIS, keepdims=True)
    return FusedDirichlet(belief_fuse=belief, u_fuse=u_fuse, e_fuse=evidence, alpha_fuse=alpha,
                          prob_fuse=prob, conflict=conflict, conflict_overflow=overflow_count)


def fused_prob(fused: FusedDirichlet) -> np.ndarray:
    return fused.prob_fuse


def fuse_evidence_arrays(evidence_a: np.ndarray, evidence_b: np.ndarray) -> FusedDirichlet:
    """Combine two raw (..., K, H, W) evidence arrays"""
    return ds_combine(dirichlet_from_array(evidence_a), dirichlet_from_array(evidence_b))
