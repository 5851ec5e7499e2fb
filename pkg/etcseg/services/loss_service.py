"""Training objectives of the tri-branch network and their schedules.

Every loss reduces over pixels with a MEAN so magnitudes do not depend on
image size. Pseudo labels (source probabilities, uncertainty weights and the
fused probabilities) enter as constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from etcseg.autodiff import Tensor, ops, special
from etcseg.errors import DimensionError, ValidationError
from etcseg.services.evidence_service import (
    CLASS_AXIS,
    DirichletField,
    EvidenceField,
    dirichlet_from_evidence,
    per_class,
    uncertainty_weight,
)
from etcseg.services.fusion_service import ds_combine

DICE_EPS = 1e-5


@dataclass
class LossBundle:
    l_ecb: Tensor
    l_epb: Tensor
    l_cs12: Tensor
    l_cs21: Tensor
    l_bucs: Tensor
    l_efb: Tensor
    l_total: Tensor
    lam: float
    lambda_kl: float
    conflict_overflow: int = 0

    def components(self) -> dict:
        return {
            'l_ecb': self.l_ecb.item(),
            'l_epb': self.l_epb.item(),
            'l_cs12': self.l_cs12.item(),
            'l_cs21': self.l_cs21.item(),
            'l_bucs': self.l_bucs.item(),
            'l_efb': self.l_efb.item(),
            'l_total': self.l_total.item(),
        }


@dataclass(frozen=True)
class LossSwitches:
    """Which unsupervised terms run and whether pseudo labels are uncertainty-weighted"""
    use_cs12: bool = True
    use_cs21: bool = True
    use_efb: bool = True
    weight_cs12: bool = True
    weight_cs21: bool = True


def validate_one_hot(y, num_classes: int) -> np.ndarray:
    y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if y.ndim < 3 or y.shape[CLASS_AXIS] != num_classes:
        raise ValidationError(f"labels must be one-hot (..., {num_classes}, H, W), got shape {y.shape}")
    if not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=CLASS_AXIS) == 1):
        raise ValidationError("labels are not one-hot per pixel")
    return y


def _check_same_shape(op_name: str, a: Sequence[int], b: Sequence[int]):
    if tuple(a) != tuple(b):
        raise DimensionError(f"{op_name}: shape mismatch {tuple(a)} vs {tuple(b)}")


# -- evidential conservative branch -------------------------------------------------

def ece_loss(d: DirichletField, y) -> Tensor:
    """Mean over pixels of sum_k y_k (psi(S) - psi(alpha_k))"""
    y = validate_one_hot(y, d.num_classes)
    _check_same_shape('ece_loss', d.shape, y.shape)
    psi_strength = per_class(special.digamma(d.strength), d.num_classes)
    gap = ops.sub(psi_strength, special.digamma(d.alpha))
    return ops.mean(ops.sum(ops.mul(Tensor(y), gap), axis=CLASS_AXIS))


def kl_to_uniform(d: DirichletField, y) -> Tensor:
    """Mean over pixels of KL(Dir(alpha_tilde) || Dir(1)), true-class evidence removed"""
    y = validate_one_hot(y, d.num_classes)
    _check_same_shape('kl_to_uniform', d.shape, y.shape)
    k = d.num_classes
    alpha_tilde = ops.add(Tensor(y), ops.mul(Tensor(1.0 - y), d.alpha))
    strength_tilde = ops.sum(alpha_tilde, axis=CLASS_AXIS)
    log_norm = ops.sub(
        ops.sub(special.lgamma(strength_tilde), float(special.lgamma_values(float(k)))),
        ops.sum(special.lgamma(alpha_tilde), axis=CLASS_AXIS),
    )
    digamma_gap = ops.sub(special.digamma(alpha_tilde),
                          per_class(special.digamma(strength_tilde), k))
    moment = ops.sum(ops.mul(ops.sub(alpha_tilde, 1.0), digamma_gap), axis=CLASS_AXIS)
    return ops.mean(ops.add(log_norm, moment))


def lambda_kl_schedule(t: float, warmup: int = 200) -> float:
    return min(1.0, t / warmup)


def ecb_loss(d: DirichletField, y, t: float, warmup: int = 200) -> Tensor:
    weight = lambda_kl_schedule(t, warmup)
    ece = ece_loss(d, y)
    if weight == 0:
        return ece
    return ops.add(ece, ops.mul(kl_to_uniform(d, y), weight))


# -- evidential progressive branch -------------------------------------------------------

def epb_loss(d: DirichletField, y, eps: float = DICE_EPS) -> Tensor:
    """Evidential Dice: (1/K) sum_k (1 - (2 sum_i p_ik y_ik + eps) / (sum_i p_ik + y_ik + eps))"""
    y = validate_one_hot(y, d.num_classes)
    _check_same_shape('epb_loss', d.shape, y.shape)
    ndim = d.prob.ndim
    pixel_axes = tuple(ax for ax in range(ndim) if ax != ndim + CLASS_AXIS)
    y_t = Tensor(y)
    intersection = ops.sum(ops.mul(d.prob, y_t), axis=pixel_axes)
    denominator = ops.add(ops.sum(d.prob, axis=pixel_axes), Tensor(y.sum(axis=pixel_axes)))
    ratio = ops.div(ops.add(ops.mul(intersection, 2.0), eps), ops.add(denominator, eps))
    return ops.mean(ops.sub(1.0, ratio))


# -- bidirectional uncertainty-guided cross supervision -------------------------------------

def cross_sup_loss(source: DirichletField, target: DirichletField, weighted: bool = True) -> Tensor:
    """(1/K) mean_i w_i^src ||p_i^src - p_i^tgt||_2 with the source held constant"""
    _check_same_shape('cross_sup_loss', source.shape, target.shape)
    if weighted:
        weight = uncertainty_weight(source)
    else:
        weight = Tensor(np.ones(source.uncertainty.shape))
    pseudo = Tensor(source.prob.data)
    distance = ops.norm(ops.sub(target.prob, pseudo), axis=CLASS_AXIS)
    return ops.mul(ops.mean(ops.mul(weight, distance)), 1.0 / target.num_classes)


def bucs_loss(d1: DirichletField, d2: DirichletField, weight_12: bool = True,
              weight_21: bool = True) -> Tuple[Tensor, Tensor, Tensor]:
    l_cs12 = cross_sup_loss(d1, d2, weighted=weight_12)
    l_cs21 = cross_sup_loss(d2, d1, weighted=weight_21)
    return l_cs12, l_cs21, ops.add(l_cs12, l_cs21)


# -- evidential fusion branch ------------------------------------------------------------------

def efb_loss(p_fuse, d3: DirichletField) -> Tensor:
    """Mean over pixels of ||p_fuse - p3||_2; p_fuse is a constant"""
    p_fuse = p_fuse.data if isinstance(p_fuse, Tensor) else np.asarray(p_fuse, dtype=np.float64)
    _check_same_shape('efb_loss', p_fuse.shape, d3.shape)
    return ops.mean(ops.norm(ops.sub(d3.prob, Tensor(p_fuse)), axis=CLASS_AXIS))


# -- total objective -----------------------------------------------------------------------------

def lambda_schedule(t: float, t_max: float, w_max: float = 0.1) -> float:
    """Gaussian ramp-up w_max * exp(-5 (1 - t/t_max)^2), flat after t_max"""
    progress = min(t, t_max) / t_max
    return w_max * math.exp(-5.0 * (1.0 - progress) ** 2)


def _zero() -> Tensor:
    return Tensor(0.0)


def total_loss(
    evidence: Sequence[EvidenceField],
    y_labeled,
    labeled_mask: Sequence[bool],
    t: float,
    t_max: float,
    w_max: float = 0.1,
    switches: LossSwitches = LossSwitches(),
    force_lambda: Optional[float] = None,
    kl_warmup: int = 200,
    dice_eps: float = DICE_EPS,
) -> LossBundle:
    """Tri-branch objective for one batch

    ``evidence`` holds the (B, K, H, W) fields of ECB, EPB and EFB;
    ``y_labeled`` holds one-hot labels of the labeled images only, in batch order.
    """
    ecb_e, epb_e, efb_e = evidence
    mask = np.asarray(labeled_mask, dtype=bool)
    labeled_idx = np.flatnonzero(mask)
    if labeled_idx.size == 0:
        raise ValidationError("batch holds no labeled pixels; supervised terms are undefined")
    y_labeled = np.asarray(y_labeled.data if isinstance(y_labeled, Tensor) else y_labeled, dtype=np.float64)
    if y_labeled.shape[0] != labeled_idx.size:
        raise ValidationError(f"{labeled_idx.size} labeled images but labels for {y_labeled.shape[0]}")

    d1 = dirichlet_from_evidence(ecb_e)
    d2 = dirichlet_from_evidence(epb_e)
    d3 = dirichlet_from_evidence(efb_e)
    d1_lab = dirichlet_from_evidence(EvidenceField(ops.select(ecb_e.e, labeled_idx, axis=0)))
    d2_lab = dirichlet_from_evidence(EvidenceField(ops.select(epb_e.e, labeled_idx, axis=0)))

    lambda_kl = lambda_kl_schedule(t, kl_warmup)
    l_ecb = ecb_loss(d1_lab, y_labeled, t, kl_warmup)
    l_epb = epb_loss(d2_lab, y_labeled, dice_eps)

    lam = lambda_schedule(t, t_max, w_max) if force_lambda is None else float(force_lambda)
    l_cs12 = cross_sup_loss(d1, d2, switches.weight_cs12) if switches.use_cs12 else _zero()
    l_cs21 = cross_sup_loss(d2, d1, switches.weight_cs21) if switches.use_cs21 else _zero()
    l_bucs = ops.add(l_cs12, l_cs21)

    conflict_overflow = 0
    if switches.use_efb:
        fused = ds_combine(d1, d2)
        conflict_overflow = fused.conflict_overflow
        l_efb = efb_loss(fused.prob_fuse, d3)
    else:
        l_efb = _zero()

    supervised = ops.add(l_ecb, l_epb)
    if lam == 0:
        l_total = supervised
    else:
        l_total = ops.add(supervised, ops.mul(ops.add(l_bucs, l_efb), lam))
    return LossBundle(l_ecb=l_ecb, l_epb=l_epb, l_cs12=l_cs12, l_cs21=l_cs21, l_bucs=l_bucs,
                      l_efb=l_efb, l_total=l_total, lam=lam, lambda_kl=lambda_kl,
                      conflict_overflow=conflict_overflow)
