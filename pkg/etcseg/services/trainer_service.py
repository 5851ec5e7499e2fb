"""Semi-supervised optimization loop, evaluation and checkpointing.

One step runs the three branches on a batch of labeled and unlabeled images,
builds the tri-branch objective and applies one SGD update. Runs write a loss
CSV, an evaluation history (JSON lines) and atomic checkpoints so an
interrupted run resumes onto the same trajectory.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from etcseg.autodiff import Tensor, no_grad
from etcseg.autodiff.serialization import atomic_write_bytes
from etcseg.config import Config, TrainConfig
from etcseg.errors import ConfigError, FormatError, NumericError
from etcseg.services.data_service import BatchSampler, SegBatch, SegDataset, SegSample, split
from etcseg.services.evidence_service import CLASS_AXIS, dirichlet_from_array
from etcseg.services.loss_service import LossBundle, LossSwitches, total_loss
from etcseg.services.metrics_service import REPORT_BRANCHES, MetricAccumulator, MetricReport, boundary_band
from etcseg.services.model_service import BRANCHES, TriBranchNet, decode_weights, encode_weights
from etcseg.services.optimizer_service import SGD, poly_lr

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ('t', 'lr', 'lambda', 'lambda_kl', 'l_ecb', 'l_epb', 'l_cs12', 'l_cs21', 'l_efb', 'l_total')
LOSS_FILE = 'loss_history.csv'
METRICS_FILE = 'metrics.jsonl'
RESOLVED_CONFIG_FILE = 'resolved_config.json'
FINAL_WEIGHTS_FILE = 'final_weights.etcw'
WEIGHTS_FILE = 'weights.etcw'
MOMENTUM_FILE = 'momentum.etcw'
STATE_FILE = 'state.json'


# -- inference ---------------------------------------------------------------------

@dataclass
class BranchPrediction:
    prob: np.ndarray                      # (K, H, W)
    uncertainty: Optional[np.ndarray]     # (H, W); None for the ensemble

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.prob, axis=CLASS_AXIS)


def predict(net: TriBranchNet, image: np.ndarray) -> Dict[str, BranchPrediction]:
    """Full-image inference on one (1, H, W) image; ensemble = mean of the branch p-hats"""
    with no_grad():
        fields = net.forward(np.asarray(image, dtype=np.float64)[None])
    out: Dict[str, BranchPrediction] = {}
    for branch, evidence in zip(BRANCHES, fields):
        dirichlet = dirichlet_from_array(evidence.e.data[0])
        out[branch] = BranchPrediction(prob=dirichlet.prob.data, uncertainty=dirichlet.uncertainty.data)
    out['ensemble'] = BranchPrediction(prob=np.mean([out[b].prob for b in BRANCHES], axis=0), uncertainty=None)
    return out


def _as_list(samples: Sequence[SegSample]) -> List[SegSample]:
    return [samples[i] for i in range(len(samples))]


def _predict_all(net: TriBranchNet, samples: List[SegSample]) -> List[Dict[str, BranchPrediction]]:
    frozen = net.copy()
    with ThreadPoolExecutor(max_workers=Config.num_threads()) as pool:
        return list(pool.map(lambda sample: predict(frozen, sample.image), samples))


UNCERTAINTY_KEYS = ('u_on_correct', 'u_on_wrong', 'u_boundary', 'u_interior')


def _uncertainty_split(predictions, samples) -> Dict[str, Dict[str, Optional[float]]]:
    bands = [boundary_band(sample.label) for sample in samples]
    split_out = {}
    for branch in BRANCHES:
        sums = np.zeros(len(UNCERTAINTY_KEYS))
        counts = np.zeros(len(UNCERTAINTY_KEYS), dtype=np.int64)
        for pred, sample, band in zip(predictions, samples, bands):
            correct = pred[branch].labels == sample.label
            u = pred[branch].uncertainty
            for i, mask in enumerate((correct, ~correct, band, ~band)):
                sums[i] += u[mask].sum()
                counts[i] += int(mask.sum())
        split_out[branch] = {key: float(sums[i] / counts[i]) if counts[i] else None
                             for i, key in enumerate(UNCERTAINTY_KEYS)}
    return split_out


def evaluate_all(net: TriBranchNet, samples: Sequence[SegSample]) -> Tuple[MetricReport, Dict]:
    """Metric report and uncertainty split from a single inference pass"""
    samples = _as_list(samples)
    predictions = _predict_all(net, samples)
    accumulators = {name: MetricAccumulator(net.num_classes) for name in REPORT_BRANCHES}
    for pred, sample in zip(predictions, samples):
        for name in REPORT_BRANCHES:
            accumulators[name].add(pred[name].labels, sample.label)
    report = MetricReport.from_accumulators(accumulators)
    return report, _uncertainty_split(predictions, samples)


def evaluate(net: TriBranchNet, samples: Sequence[SegSample]) -> MetricReport:
    return evaluate_all(net, samples)[0]


def mean_uncertainty_split(net: TriBranchNet, samples: Sequence[SegSample]) -> Dict[str, Dict[str, Optional[float]]]:
    """Mean u per branch on correct vs wrong pixels and near vs away from class boundaries; None where a set is empty"""
    samples = _as_list(samples)
    return _uncertainty_split(_predict_all(net, samples), samples)


# -- training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    output_dir: Path
    iterations: int
    final_report: Optional[MetricReport] = None
    uncertainty: Optional[Dict] = None
    conflict_overflow: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)


class Trainer:
    """Owns the network, optimizer, sampler and iteration counter of one run"""

    def __init__(self, config: TrainConfig, train_set: SegDataset):
        self.config = config
        self.net = TriBranchNet.initialize(config.seed, config.num_classes, config.widths, config.head_bias_init)
        self.optimizer = SGD(self.net.named_parameters(), momentum=config.momentum)
        labeled, unlabeled = split(len(train_set), config.labeled_fraction, config.seed)
        self.sampler = BatchSampler(train_set, labeled, unlabeled, config.batch_labeled,
                                    config.unlabeled_per_batch, seed=config.seed)
        self.switches = LossSwitches(
            use_cs12=config.use_cs12 and not config.supervised_only,
            use_cs21=config.use_cs21 and not config.supervised_only,
            use_efb=config.use_efb and not config.supervised_only,
            weight_cs12=config.weight_cs12,
            weight_cs21=config.weight_cs21,
        )
        self.force_lambda = 0.0 if config.supervised_only else config.force_lambda
        self.t = 0
        self.conflict_overflow = 0
        self.history: List[Dict[str, float]] = []
        logger.info(f"Trainer ready: {self.net.param_count} parameters, {len(labeled)} labeled / "
                    f"{len(unlabeled)} unlabeled samples")

    def learning_rate(self, t: Optional[int] = None) -> float:
        t = self.t if t is None else t
        return poly_lr(t, self.config.lr0, self.config.iterations, self.config.poly_power)

    def compute_loss(self, batch: SegBatch) -> LossBundle:
        fields = self.net.forward(Tensor(batch.images))
        return total_loss(
            fields, batch.labeled_onehot, batch.labeled_mask, t=self.t, t_max=self.config.ramp_horizon,
            w_max=self.config.w_max, switches=self.switches, force_lambda=self.force_lambda,
            kl_warmup=self.config.kl_warmup, dice_eps=self.config.dice_eps,
        )

    def train_step(self, batch: SegBatch) -> LossBundle:
        lr = self.learning_rate()
        self.optimizer.zero_grad()
        try:
            bundle = self.compute_loss(batch)
            components = bundle.components()
            if not np.all(np.isfinite(list(components.values()))):
                raise NumericError("non-finite loss", {'components': components})
            bundle.l_total.backward()
        except NumericError as exc:
            context = {'iteration': self.t, 'lr': lr, **exc.context}
            raise NumericError(f"training aborted at iteration {self.t}: {exc.message}", context) from exc

        self.optimizer.step(lr)
        self.conflict_overflow += bundle.conflict_overflow
        self.history.append({
            't': self.t, 'lr': lr, 'lambda': bundle.lam, 'lambda_kl': bundle.lambda_kl,
            'l_ecb': components['l_ecb'], 'l_epb': components['l_epb'], 'l_cs12': components['l_cs12'],
            'l_cs21': components['l_cs21'], 'l_efb': components['l_efb'], 'l_total': components['l_total'],
        })
        self.t += 1
        return bundle

    # -- checkpoints -------------------------------------------------------------
    def save_checkpoint(self, directory):
        """Weights and momentum first, then state.json naming their digests"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        weights = encode_weights(self.net.num_classes, self.net.widths, self.net.state_arrays())
        momentum = encode_weights(self.net.num_classes, self.net.widths, self.optimizer.buffers)
        atomic_write_bytes(directory / WEIGHTS_FILE, weights)
        atomic_write_bytes(directory / MOMENTUM_FILE, momentum)
        state = {'t': self.t, 'sampler': self.sampler.state(), 'conflict_overflow': self.conflict_overflow,
                 'digests': {WEIGHTS_FILE: _digest(weights), MOMENTUM_FILE: _digest(momentum)}}
        atomic_write_bytes(directory / STATE_FILE, json.dumps(state).encode('utf-8'))
        logger.info(f"Checkpoint at t={self.t} written to {directory}")

    def load_checkpoint(self, directory):
        directory = Path(directory)
        state = json.loads((directory / STATE_FILE).read_text(encoding='utf-8'))
        payloads = {name: (directory / name).read_bytes() for name in (WEIGHTS_FILE, MOMENTUM_FILE)}
        for name, payload in payloads.items():
            if state.get('digests', {}).get(name) != _digest(payload):
                raise FormatError(f"checkpoint {directory}: {name} does not match state.json",
                                  {'path': str(directory / name)})
        num_classes, widths, arrays = decode_weights(payloads[WEIGHTS_FILE], source=str(directory / WEIGHTS_FILE))
        if num_classes != self.net.num_classes or widths != self.net.widths:
            raise ConfigError(f"checkpoint {directory} does not match the configured architecture",
                              {'path': str(directory)})
        self.net.load_arrays(arrays)
        _, _, buffers = decode_weights(payloads[MOMENTUM_FILE], source=str(directory / MOMENTUM_FILE))
        self.optimizer.load_buffers(buffers)
        self.t = int(state['t'])
        self.sampler.restore(state['sampler'])
        self.conflict_overflow = int(state['conflict_overflow'])
        logger.info(f"Resumed from {directory} at t={self.t}")


def _digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def has_checkpoint(directory) -> bool:
    directory = Path(directory)
    return all((directory / name).is_file() for name in (WEIGHTS_FILE, MOMENTUM_FILE, STATE_FILE))


def load_split(dataset_path, name: str, num_classes: int) -> Optional[SegDataset]:
    root = Path(dataset_path) / name
    if not root.is_dir():
        return None
    dataset = SegDataset(root)
    if dataset.num_classes != num_classes:
        raise ConfigError(f"dataset {root} has K={dataset.num_classes} but num_classes={num_classes}",
                          {'key': 'num_classes'})
    return dataset


def write_resolved_config(config: TrainConfig, output_dir) -> Path:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / RESOLVED_CONFIG_FILE
    atomic_write_bytes(path, config.to_json().encode('utf-8'))
    return path


def _trim_loss_csv(path: Path, t: int):
    """Keep rows of iterations before ``t``"""
    with open(path, newline='', encoding='utf-8') as handle:
        rows = [row for row in csv.DictReader(handle) if int(row['t']) < t]
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _trim_metrics(path: Path, t: int):
    lines = [line for line in path.read_text(encoding='utf-8').splitlines()
             if line.strip() and json.loads(line)['t'] <= t]
    path.write_text(''.join(line + '\n' for line in lines), encoding='utf-8')


def _format_row(row: Dict[str, float]) -> Dict[str, str]:
    return {key: (str(row[key]) if key == 't' else repr(float(row[key]))) for key in LOSS_COLUMNS}


def run_training(config: TrainConfig) -> TrainResult:
    """Train to ``config.iterations``, evaluating and checkpointing along the way"""
    config.validate()
    output_dir = Path(config.output_dir)
    write_resolved_config(config, output_dir)

    train_set = load_split(config.dataset_path, 'train', config.num_classes)
    if train_set is None:
        raise ConfigError(f"dataset not found: {Path(config.dataset_path) / 'train'}",
                          {'path': str(config.dataset_path)})
    test_set = load_split(config.dataset_path, 'test', config.num_classes)
    if test_set is None:
        logger.warning(f"No test split under {config.dataset_path}; evaluations are skipped")

    trainer = Trainer(config, train_set)
    loss_path = output_dir / LOSS_FILE
    metrics_path = output_dir / METRICS_FILE
    checkpoint_dir = config.checkpoint_dir
    resuming = config.resume and has_checkpoint(checkpoint_dir)
    if resuming:
        trainer.load_checkpoint(checkpoint_dir)
    if resuming and loss_path.is_file():
        _trim_loss_csv(loss_path, trainer.t)
    else:
        with open(loss_path, 'w', newline='', encoding='utf-8') as handle:
            csv.DictWriter(handle, fieldnames=LOSS_COLUMNS).writeheader()
    if resuming and metrics_path.is_file():
        _trim_metrics(metrics_path, trainer.t)
    else:
        metrics_path.write_text('', encoding='utf-8')

    result = TrainResult(output_dir=output_dir, iterations=config.iterations)
    progress = tqdm(total=config.iterations, initial=trainer.t, disable=not config.progress, desc='train')
    with open(loss_path, 'a', newline='', encoding='utf-8') as loss_handle:
        writer = csv.DictWriter(loss_handle, fieldnames=LOSS_COLUMNS)
        while trainer.t < config.iterations:
            bundle = trainer.train_step(trainer.sampler.next_batch())
            writer.writerow(_format_row(trainer.history[-1]))
            loss_handle.flush()
            progress.update(1)
            progress.set_postfix(loss=f"{bundle.l_total.item():.4f}", lam=f"{bundle.lam:.4f}")

            done = trainer.t
            finished = done == config.iterations
            if test_set is not None and (done % config.eval_every == 0 or finished):
                report, uncertainty = evaluate_all(trainer.net, test_set)
                record = {'t': done, 'report': report.to_dict(), 'uncertainty': uncertainty,
                          'conflict_overflow': trainer.conflict_overflow}
                with open(metrics_path, 'a', encoding='utf-8') as handle:
                    handle.write(json.dumps(record, sort_keys=True) + '\n')
                logger.info(f"t={done}: ensemble DSC {report.mean_dsc('ensemble')}")
                result.final_report, result.uncertainty = report, uncertainty
            if done % config.checkpoint_interval == 0 or finished:
                trainer.save_checkpoint(checkpoint_dir)
    progress.close()

    trainer.net.save(output_dir / FINAL_WEIGHTS_FILE)
    result.conflict_overflow = trainer.conflict_overflow
    result.history = trainer.history
    if trainer.conflict_overflow:
        logger.warning(f"Total-conflict fallback used at {trainer.conflict_overflow} pixel(s) during training")
    return result
