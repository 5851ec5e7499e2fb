"""Segmentation metrics: Dice, Jaccard, average surface distance and HD95.

Boundaries use 4-connectivity with the image border counted as outside.
Distances are in pixels. HD95 is the nearest-rank 95th percentile of the
pooled directed nearest-neighbour distances from both directions.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from etcseg.errors import DimensionError

logger = logging.getLogger(__name__)

METRICS = ('dsc', 'jac', 'asd', 'hd95')
REPORT_BRANCHES = ('ecb', 'epb', 'efb', 'ensemble')
HD_PERCENTILE = 0.95
_CROSS = ndimage.generate_binary_structure(2, 1)


def _binary(mask) -> np.ndarray:
    return np.asarray(mask).astype(bool)


def _check_pair(pred_mask, true_mask) -> Tuple[np.ndarray, np.ndarray]:
    pred, true = _binary(pred_mask), _binary(true_mask)
    if pred.shape != true.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    return pred, true


def overlap_metrics(pred_mask, true_mask) -> Tuple[float, float]:
    """(dsc, jac); two empty masks agree perfectly"""
    pred, true = _check_pair(pred_mask, true_mask)
    intersection = float(np.logical_and(pred, true).sum())
    union = float(np.logical_or(pred, true).sum())
    total = float(pred.sum() + true.sum())
    if total == 0:
        return 1.0, 1.0
    return 2.0 * intersection / total, intersection / union


def boundary(mask) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask"""
    mask = _binary(mask)
    eroded = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~eroded


def boundary_band(label, width: int = 1) -> np.ndarray:
    """Pixels within ``width`` steps of a change of class in an (H, W) label map"""
    label = np.asarray(label)
    edges = np.zeros(label.shape, dtype=bool)
    edges[:, 1:] |= label[:, 1:] != label[:, :-1]
    edges[1:, :] |= label[1:, :] != label[:-1, :]
    if not edges.any() or width == 0:
        return edges
    return ndimage.binary_dilation(edges, iterations=width)


def nearest_rank(values: np.ndarray, q: float) -> float:
    ordered = np.sort(values)
    rank = max(1, int(math.ceil(q * ordered.size)))
    return float(ordered[rank - 1])


def surface_metrics(pred_mask, true_mask) -> Tuple[Optional[float], Optional[float]]:
    """(asd, hd95) in pixels, or (None, None) when either mask is empty"""
    pred, true = _check_pair(pred_mask, true_mask)
    if not pred.any() or not true.any():
        return None, None
    pred_points = np.argwhere(boundary(pred))
    true_points = np.argwhere(boundary(true))
    distances = cdist(pred_points, true_points)
    pred_to_true = distances.min(axis=1)
    true_to_pred = distances.min(axis=0)
    asd = 0.5 * (float(pred_to_true.mean()) + float(true_to_pred.mean()))
    hd95 = nearest_rank(np.concatenate([pred_to_true, true_to_pred]), HD_PERCENTILE)
    return asd, hd95


def class_metrics(pred_mask, true_mask) -> Dict[str, Optional[float]]:
    dsc, jac = overlap_metrics(pred_mask, true_mask)
    asd, hd95 = surface_metrics(pred_mask, true_mask)
    return {'dsc': dsc, 'jac': jac, 'asd': asd, 'hd95': hd95}


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


@dataclass
class MetricAccumulator:
    """Per-class running lists for one branch; classes 1..K-1 are scored"""
    num_classes: int
    values: Dict[int, Dict[str, List[Optional[float]]]] = field(default_factory=dict)
    excluded_surface_cases: int = 0

    def __post_init__(self):
        for cls in self.foreground_classes:
            self.values.setdefault(cls, {name: [] for name in METRICS})

    @property
    def foreground_classes(self) -> range:
        return range(1, self.num_classes)

    def add(self, pred_labels: np.ndarray, true_labels: np.ndarray):
        pred_labels = np.asarray(pred_labels)
        true_labels = np.asarray(true_labels)
        if pred_labels.shape != true_labels.shape:
            raise DimensionError(f"label maps differ: {pred_labels.shape} vs {true_labels.shape}")
        for cls in self.foreground_classes:
            scores = class_metrics(pred_labels == cls, true_labels == cls)
            if scores['asd'] is None:
                self.excluded_surface_cases += 1
            for name in METRICS:
                self.values[cls][name].append(scores[name])

    def summary(self) -> Dict[str, Dict[str, Optional[float]]]:
        out: Dict[str, Dict[str, Optional[float]]] = {}
        for cls in self.foreground_classes:
            out[f'class_{cls}'] = {name: _mean(self.values[cls][name]) for name in METRICS}
        out['mean'] = {name: _mean([out[f'class_{cls}'][name] for cls in self.foreground_classes])
                       for name in METRICS}
        return out


@dataclass
class MetricReport:
    """Per-branch class and mean metrics plus the count of undefined surface cases"""
    branches: Dict[str, Dict[str, Dict[str, Optional[float]]]]
    excluded_surface_cases: int = 0

    @classmethod
    def from_accumulators(cls, accumulators: Dict[str, MetricAccumulator]) -> 'MetricReport':
        excluded = sum(acc.excluded_surface_cases for acc in accumulators.values())
        if excluded:
            logger.warning(f"{excluded} surface metric case(s) undefined (empty mask) and excluded from means")
        return cls(branches={name: acc.summary() for name, acc in accumulators.items()},
                   excluded_surface_cases=excluded)

    def mean_dsc(self, branch: str) -> Optional[float]:
        return self.branches[branch]['mean']['dsc']

    def to_dict(self) -> Dict:
        payload: Dict = dict(self.branches)
        payload['excluded_surface_cases'] = self.excluded_surface_cases
        return payload

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
