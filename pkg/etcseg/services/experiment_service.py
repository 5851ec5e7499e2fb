"""Multi-seed studies: ETC against a supervised-only baseline, labeled-ratio
sweeps and loss-component ablations.

Every run writes its own run directory under ``config.output_dir``; each study
writes a JSON summary next to them.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from etcseg.config import TrainConfig
from etcseg.services.trainer_service import LOSS_FILE, TrainResult, run_training

logger = logging.getLogger(__name__)

DSC_GAIN_POINTS = 2.0
ENSEMBLE_TOLERANCE_POINTS = 0.5

ABLATIONS: Dict[str, Dict[str, bool]] = {
    'full': {},
    'no_cs12': {'use_cs12': False},
    'no_cs21': {'use_cs21': False},
    'no_bucs': {'use_cs12': False, 'use_cs21': False},
    'no_efb': {'use_efb': False},
    'unweighted_cs12': {'weight_cs12': False},
    'unweighted_cs21': {'weight_cs21': False},
    'unweighted_bucs': {'weight_cs12': False, 'weight_cs21': False},
}


@dataclass
class RunSummary:
    name: str
    seed: int
    dsc: Dict[str, Optional[float]]
    uncertainty: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    conflict_overflow: int = 0

    @classmethod
    def from_result(cls, name: str, seed: int, result: TrainResult) -> 'RunSummary':
        report = result.final_report
        dsc = {branch: report.mean_dsc(branch) for branch in report.branches} if report else {}
        return cls(name=name, seed=seed, dsc=dsc, uncertainty=result.uncertainty or {},
                   conflict_overflow=result.conflict_overflow)


def _points(value: Optional[float]) -> float:
    return float('nan') if value is None else 100.0 * value


def _run(config: TrainConfig, name: str, seed: int, **changes) -> RunSummary:
    run_dir = Path(config.output_dir) / f'{name}_seed{seed}'
    run_config = config.updated({'seed': seed, 'output_dir': str(run_dir), 'checkpoint_path': None,
                                 'resume': False, **changes})
    logger.info(f"Run {name} seed={seed} -> {run_dir}")
    return RunSummary.from_result(name, seed, run_training(run_config))


def _write_summary(config: TrainConfig, filename: str, payload: Dict) -> Path:
    path = Path(config.output_dir) / filename
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str), encoding='utf-8')
    logger.info(f"Summary written to {path}")
    return path


def compare_with_baseline(config: TrainConfig, seeds: Sequence[int]) -> Dict:
    """ETC vs supervised-only baseline per seed, with gain, branch-order and uncertainty verdicts"""
    etc_runs = [_run(config, 'etc', seed) for seed in seeds]
    base_runs = [_run(config, 'baseline', seed, supervised_only=True) for seed in seeds]

    gains = [_points(e.dsc.get('ensemble')) - _points(b.dsc.get('ensemble')) for e, b in zip(etc_runs, base_runs)]
    mean_branch = {branch: float(np.mean([_points(r.dsc.get(branch)) for r in etc_runs]))
                   for branch in ('ecb', 'epb', 'efb', 'ensemble')}
    uncertainty_ok = [
        all(run.uncertainty.get(branch, {}).get('u_on_wrong') is not None
            and run.uncertainty[branch]['u_on_correct'] is not None
            and run.uncertainty[branch]['u_on_wrong'] > run.uncertainty[branch]['u_on_correct']
            for branch in ('ecb', 'epb'))
        for run in etc_runs
    ]
    boundary_ok = [
        all(run.uncertainty.get(branch, {}).get('u_boundary') is not None
            and run.uncertainty[branch]['u_interior'] is not None
            and run.uncertainty[branch]['u_boundary'] > run.uncertainty[branch]['u_interior']
            for branch in ('ecb', 'epb'))
        for run in etc_runs
    ]
    summary = {
        'seeds': list(seeds),
        'etc': [run.__dict__ for run in etc_runs],
        'baseline': [run.__dict__ for run in base_runs],
        'dsc_gain_points': gains,
        'mean_dsc_gain_points': float(np.mean(gains)),
        'mean_branch_dsc_points': mean_branch,
        'uncertainty_error_ordering': uncertainty_ok,
        'uncertainty_boundary_ordering': boundary_ok,
        'verdicts': {
            'semi_supervised_gain': bool(np.mean(gains) >= DSC_GAIN_POINTS),
            'ensemble_not_worse': bool(mean_branch['ensemble']
                                       >= max(mean_branch[b] for b in ('ecb', 'epb', 'efb'))
                                       - ENSEMBLE_TOLERANCE_POINTS),
            'uncertainty_flags_errors': all(uncertainty_ok),
            'uncertainty_peaks_at_boundaries': all(boundary_ok),
        },
    }
    _write_summary(config, 'comparison.json', summary)
    return summary


def labeled_fraction_study(config: TrainConfig, fractions: Sequence[float], seeds: Sequence[int]) -> Dict:
    """Ensemble DSC of ETC and the baseline for each labeled fraction"""
    rows: List[Dict] = []
    for fraction in fractions:
        tag = f'frac{fraction:g}'
        etc = [_run(config, f'etc_{tag}', seed, labeled_fraction=fraction) for seed in seeds]
        base = [_run(config, f'baseline_{tag}', seed, labeled_fraction=fraction, supervised_only=True)
                for seed in seeds]
        rows.append({
            'labeled_fraction': fraction,
            'etc_dsc_points': float(np.mean([_points(r.dsc.get('ensemble')) for r in etc])),
            'baseline_dsc_points': float(np.mean([_points(r.dsc.get('ensemble')) for r in base])),
        })
    summary = {'seeds': list(seeds), 'rows': rows}
    _write_summary(config, 'labeled_fraction_study.json', summary)
    return summary


def ablation_study(config: TrainConfig, seeds: Sequence[int], variants: Optional[Sequence[str]] = None) -> Dict:
    """Loss-component and uncertainty-guidance variants of the full objective"""
    variants = list(variants or ABLATIONS)
    rows = {}
    for name in variants:
        runs = [_run(config, f'ablation_{name}', seed, **ABLATIONS[name]) for seed in seeds]
        rows[name] = {branch: float(np.mean([_points(r.dsc.get(branch)) for r in runs]))
                      for branch in ('ecb', 'epb', 'efb', 'ensemble')}
    summary = {'seeds': list(seeds), 'variants': rows}
    _write_summary(config, 'ablation_study.json', summary)
    return summary


def check_determinism(config: TrainConfig, seed: int) -> Dict:
    """Train the same seed twice and compare the loss CSVs byte for byte"""
    first = Path(config.output_dir) / f'determinism_a_seed{seed}'
    second = Path(config.output_dir) / f'determinism_b_seed{seed}'
    for run_dir in (first, second):
        run_training(config.updated({'seed': seed, 'output_dir': str(run_dir), 'checkpoint_path': None,
                                     'resume': False}))
    identical = (first / LOSS_FILE).read_bytes() == (second / LOSS_FILE).read_bytes()
    summary = {'seed': seed, 'loss_csv_identical': identical}
    _write_summary(config, 'determinism.json', summary)
    return summary
