"""Synthetic multi-class segmentation data: generation, persistence, batching.

Each image places one shape per foreground class (disk, ring, rectangle, in
that rotation) on a background, renders class-specific intensities, adds
Gaussian noise and a box blur, and normalizes to zero mean / unit variance.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from etcseg.autodiff.serialization import load_tensor, save_tensor
from etcseg.config import Config
from etcseg.errors import ConfigError, FormatError, GenerationError

logger = logging.getLogger(__name__)

SHAPES = ('disk', 'ring', 'rectangle')
MAX_PLACEMENT_RETRIES = 100
SPLIT_IDS = {'train': 0, 'test': 1}
META_FILE = 'meta.json'


@dataclass(frozen=True)
class GeneratorParams:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    noise_sigma: float = 0.35
    blur_radius: int = 1
    min_size: float = 0.10
    max_size: float = 0.18

    def validate(self):
        if not 2 <= self.num_classes <= 4:
            raise ConfigError(f"num_classes must be in [2, 4], got {self.num_classes}", {'key': 'num_classes'})
        if self.height % 4 or self.width % 4 or self.height <= 0 or self.width <= 0:
            raise ConfigError(f"height and width must be positive multiples of 4, got {self.height}x{self.width}",
                              {'key': 'height'})
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ConfigError("noise_sigma and blur_radius must be nonnegative", {'key': 'noise_sigma'})


@dataclass
class SegSample:
    image: np.ndarray       # (1, H, W)
    label: np.ndarray       # (H, W) integer classes


@dataclass
class SegBatch:
    images: np.ndarray          # (B, 1, H, W)
    labels: np.ndarray          # (B, H, W), meaningful where labeled
    labels_onehot: np.ndarray   # (B, K, H, W), zero rows for unlabeled images
    labeled_mask: np.ndarray    # (B,) bool

    @property
    def labeled_onehot(self) -> np.ndarray:
        return self.labels_onehot[self.labeled_mask]


def class_intensities(num_classes: int) -> np.ndarray:
    """Evenly spaced base intensities, background darkest"""
    return np.linspace(0.0, 1.0, num_classes)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(..., H, W) integer map -> (..., K, H, W) one-hot"""
    labels = np.asarray(labels, dtype=np.int64)
    encoded = np.eye(num_classes, dtype=np.float64)[labels]
    return np.moveaxis(encoded, -1, -3)


def _shape_mask(kind: str, rng: np.random.Generator, params: GeneratorParams) -> np.ndarray:
    h, w = params.height, params.width
    scale = min(h, w)
    size = rng.uniform(params.min_size, params.max_size) * scale
    rows, cols = np.mgrid[0:h, 0:w]
    cy = rng.uniform(size, h - size)
    cx = rng.uniform(size, w - size)
    if kind == 'disk':
        return (rows - cy) ** 2 + (cols - cx) ** 2 <= size ** 2
    if kind == 'ring':
        radius2 = (rows - cy) ** 2 + (cols - cx) ** 2
        return (radius2 <= size ** 2) & (radius2 >= (0.5 * size) ** 2)
    half_h = size * rng.uniform(0.6, 1.0)
    half_w = size * rng.uniform(0.6, 1.0)
    return (np.abs(rows - cy) <= half_h) & (np.abs(cols - cx) <= half_w)


def render_sample(rng: np.random.Generator, params: GeneratorParams) -> Tuple[np.ndarray, np.ndarray]:
    """One (image (1,H,W), label (H,W)) pair"""
    label = np.zeros((params.height, params.width), dtype=np.int64)
    for cls in range(1, params.num_classes):
        kind = SHAPES[(cls - 1) % len(SHAPES)]
        for _ in range(MAX_PLACEMENT_RETRIES):
            mask = _shape_mask(kind, rng, params)
            # keep a one-pixel gap so shapes never touch
            if mask.any() and not np.any(ndimage.binary_dilation(mask) & (label > 0)):
                label[mask] = cls
                break
        else:
            raise GenerationError(f"could not place a {kind} for class {cls} after {MAX_PLACEMENT_RETRIES} tries")

    image = class_intensities(params.num_classes)[label]
    if params.noise_sigma > 0:
        image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)
    if params.blur_radius > 0:
        image = ndimage.uniform_filter(image, size=2 * params.blur_radius + 1, mode='nearest')
    return normalize_image(image)[None], label


def normalize_image(image: np.ndarray) -> np.ndarray:
    std = image.std()
    return (image - image.mean()) / (std if std > 0 else 1.0)


def sample_rng(seed: int, index: int, split: str = 'train') -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, SPLIT_IDS[split]]))


def _write_split(root: Path, split: str, seed: int, n: int, params: GeneratorParams):
    root.mkdir(parents=True, exist_ok=True)

    def work(index: int):
        image, label = render_sample(sample_rng(seed, index, split), params)
        save_tensor(root / f'img_{index:05d}.etns', image)
        save_tensor(root / f'lab_{index:05d}.etns', label.astype(np.float64))

    with ThreadPoolExecutor(max_workers=Config.num_threads()) as pool:
        list(pool.map(work, range(n)))

    meta = {'n': n, 'H': params.height, 'W': params.width, 'K': params.num_classes, 'seed': seed,
            'split': split, 'generator': {'noise_sigma': params.noise_sigma, 'blur_radius': params.blur_radius,
                                          'min_size': params.min_size, 'max_size': params.max_size,
                                          'shapes': list(SHAPES)}}
    (root / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding='utf-8')
    logger.info(f"Wrote {n} {split} samples to {root}")


def generate_dataset(out_dir, seed: int, n: int, params: GeneratorParams, n_test: int = 0) -> Path:
    """Write ``<out_dir>/train`` (and ``<out_dir>/test`` when n_test > 0)"""
    params.validate()
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}", {'key': 'n_samples'})
    out_dir = Path(out_dir)
    _write_split(out_dir / 'train', 'train', seed, n, params)
    if n_test > 0:
        _write_split(out_dir / 'test', 'test', seed, n_test, params)
    return out_dir


def directory_checksum(path) -> str:
    digest = hashlib.sha256()
    for file in sorted(Path(path).rglob('*')):
        if file.is_file():
            digest.update(str(file.relative_to(path)).encode('utf-8'))
            digest.update(file.read_bytes())
    return digest.hexdigest()


class SegDataset:
    """One split directory: meta.json + img/lab ETNS files"""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / META_FILE
        if not meta_path.is_file():
            raise ConfigError(f"dataset not found: {meta_path}", {'path': str(meta_path)})
        try:
            self.meta: Dict[str, Any] = json.loads(meta_path.read_text(encoding='utf-8'))
            self.num_classes = int(self.meta['K'])
            self.height = int(self.meta['H'])
            self.width = int(self.meta['W'])
            self.size = int(self.meta['n'])
        except json.JSONDecodeError as exc:
            raise FormatError(f"{meta_path}: not valid JSON ({exc.msg})", {'path': str(meta_path)})
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{meta_path}: missing or malformed field {exc}", {'path': str(meta_path)})
        self._cache: Dict[int, SegSample] = {}

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, index: int) -> SegSample:
        if not 0 <= index < len(self):
            raise IndexError(index)
        if index not in self._cache:
            self._cache[index] = load_sample(self.root, index, self.num_classes)
        return self._cache[index]


def load_sample(root, index: int, num_classes: Optional[int] = None) -> SegSample:
    root = Path(root)
    image = load_tensor(root / f'img_{index:05d}.etns')
    label_values = load_tensor(root / f'lab_{index:05d}.etns')
    label = label_values.astype(np.int64)
    if not np.array_equal(label, label_values) or label.min() < 0 or (
            num_classes is not None and label.max() >= num_classes):
        raise FormatError(f"{root}: label map {index} holds invalid class values")
    return SegSample(image=image, label=label)


def load_image(path) -> np.ndarray:
    """A single (1, H, W) image tensor as stored by the generator"""
    image = load_tensor(path)
    if image.ndim == 2:
        image = image[None]
    return image


def split(n: int, labeled_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """Deterministic shuffled (labeled, unlabeled) index split"""
    if not 0 < labeled_fraction < 1:
        raise ConfigError(f"labeled_fraction must be in (0, 1), got {labeled_fraction}", {'key': 'labeled_fraction'})
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5E1])).permutation(n)
    count = max(1, int(math.floor(labeled_fraction * n + 0.5)))
    count = min(count, n)
    return sorted(order[:count].tolist()), sorted(order[count:].tolist())


class CyclicSampler:
    """Endless shuffled iteration over a pool; reshuffles at every epoch boundary"""

    def __init__(self, pool: Sequence[int], rng: np.random.Generator):
        self.pool = list(pool)
        self.rng = rng
        self.order: List[int] = []
        self.position = 0
        self.epoch = 0

    def take(self, count: int) -> List[int]:
        out = []
        for _ in range(count):
            if self.position >= len(self.order):
                self.order = [self.pool[i] for i in self.rng.permutation(len(self.pool))]
                self.position = 0
                self.epoch += 1
            out.append(self.order[self.position])
            self.position += 1
        return out

    def state(self) -> Dict[str, Any]:
        return {'rng': self.rng.bit_generator.state, 'order': list(self.order),
                'position': self.position, 'epoch': self.epoch}

    def restore(self, state: Dict[str, Any]):
        self.rng.bit_generator.state = state['rng']
        self.order = [int(i) for i in state['order']]
        self.position = int(state['position'])
        self.epoch = int(state['epoch'])


class BatchSampler:
    """B_l labeled + B_u unlabeled images per batch from independent cyclic streams"""

    def __init__(self, dataset: SegDataset, labeled: Sequence[int], unlabeled: Sequence[int],
                 batch_labeled: int = 2, batch_unlabeled: int = 2, seed: int = 0):
        if not labeled:
            raise ConfigError("labeled pool is empty", {'key': 'labeled_fraction'})
        if batch_unlabeled > 0 and not unlabeled:
            raise ConfigError("unlabeled pool is empty but batch_unlabeled > 0", {'key': 'batch_unlabeled'})
        self.dataset = dataset
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        self.labeled = CyclicSampler(labeled, np.random.default_rng(np.random.SeedSequence([seed, 1])))
        self.unlabeled = CyclicSampler(unlabeled, np.random.default_rng(np.random.SeedSequence([seed, 2])))

    def next_batch(self) -> SegBatch:
        labeled_ids = self.labeled.take(self.batch_labeled)
        unlabeled_ids = self.unlabeled.take(self.batch_unlabeled) if self.batch_unlabeled else []
        samples = [self.dataset[i] for i in labeled_ids + unlabeled_ids]
        images = np.stack([s.image for s in samples])
        labels = np.stack([s.label for s in samples])
        mask = np.array([True] * len(labeled_ids) + [False] * len(unlabeled_ids))
        onehot = one_hot(labels, self.dataset.num_classes)
        onehot[~mask] = 0.0
        labels = labels.copy()
        labels[~mask] = 0
        return SegBatch(images=images, labels=labels, labels_onehot=onehot, labeled_mask=mask)

    def state(self) -> Dict[str, Any]:
        return {'labeled': self.labeled.state(), 'unlabeled': self.unlabeled.state()}

    def restore(self, state: Dict[str, Any]):
        self.labeled.restore(state['labeled'])
        self.unlabeled.restore(state['unlabeled'])
