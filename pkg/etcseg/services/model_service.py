"""Tri-branch segmentation network: one shared encoder, three evidential decoders.

The decoders differ in how they upsample: ECB uses transposed convolutions,
EPB bilinear interpolation and EFB nearest-neighbour replication. Every
branch ends in a 1x1 convolution followed by softplus, so outputs are
nonnegative evidence.
"""
from __future__ import annotations

import hashlib
import io
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from etcseg.autodiff import Tensor, nn_ops, ops
from etcseg.autodiff.serialization import atomic_write_bytes, encode_tensor, read_tensor
from etcseg.errors import ConfigError, DimensionError, FormatError
from etcseg.services.evidence_service import EvidenceField

logger = logging.getLogger(__name__)

BRANCHES = ('ecb', 'epb', 'efb')
UPSAMPLING = {'ecb': 'transposed', 'epb': 'bilinear', 'efb': 'nearest'}
WEIGHTS_HEADER = 'etcseg-weights'
WEIGHTS_VERSION = 1
HEAD_WEIGHT_SCALE = 0.1


def architecture(num_classes: int, widths: Sequence[int]) -> List[Tuple[str, Tuple[int, ...]]]:
    """Ordered (name, shape) list of every parameter"""
    w1, w2, w3 = widths
    specs: List[Tuple[str, Tuple[int, ...]]] = []

    def conv(name, c_in, c_out, k):
        specs.append((f'{name}.weight', (c_out, c_in, k, k)))
        specs.append((f'{name}.bias', (c_out,)))

    conv('encoder.enc1a', 1, w1, 3)
    conv('encoder.enc1b', w1, w1, 3)
    conv('encoder.enc2a', w1, w2, 3)
    conv('encoder.enc2b', w2, w2, 3)
    conv('encoder.bottleneck_a', w2, w3, 3)
    conv('encoder.bottleneck_b', w3, w3, 3)
    for branch in BRANCHES:
        for level, (c_in, c_out) in (('up2', (w3, w2)), ('up1', (w2, w1))):
            if UPSAMPLING[branch] == 'transposed':
                specs.append((f'{branch}.{level}.weight', (c_in, c_out, 2, 2)))
                specs.append((f'{branch}.{level}.bias', (c_out,)))
            else:
                conv(f'{branch}.{level}', c_in, c_out, 3)
        conv(f'{branch}.dec2', 2 * w2, w2, 3)
        conv(f'{branch}.dec1', 2 * w1, w1, 3)
        conv(f'{branch}.head', w1, num_classes, 1)
    return specs


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if len(shape) == 4 and '.up' in name and shape[2] == 2:
        # transposed 2x2 stride-2: each output pixel sees one tap per input channel
        return shape[0]
    return int(np.prod(shape[1:]))


class TriBranchNet:
    """Shared-encoder network with ECB, EPB and EFB decoder branches"""

    def __init__(self, num_classes: int, widths: Sequence[int], params: 'OrderedDict[str, Tensor]'):
        self.num_classes = num_classes
        self.widths = tuple(int(w) for w in widths)
        self.params = params

    # -- construction ----------------------------------------------------------
    @classmethod
    def initialize(cls, seed: int, num_classes: int = 3, widths: Sequence[int] = (16, 32, 64),
                   head_bias_init: float = -2.0) -> 'TriBranchNet':
        """He-normal init; the encoder draws from ``seed``, branch i from ``seed + i``"""
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}", {'key': 'num_classes'})
        if len(widths) != 3 or any(int(w) <= 0 for w in widths):
            raise ConfigError(f"widths must be three positive ints, got {widths}", {'key': 'widths'})
        streams = {'encoder': np.random.default_rng(seed)}
        for index, branch in enumerate(BRANCHES, start=1):
            streams[branch] = np.random.default_rng(seed + index)

        params: 'OrderedDict[str, Tensor]' = OrderedDict()
        for name, shape in architecture(num_classes, widths):
            rng = streams[name.split('.')[0]]
            if name.endswith('.bias'):
                value = np.full(shape, head_bias_init if '.head.' in name else 0.0)
            else:
                std = np.sqrt(2.0 / _fan_in(name, shape))
                if '.head.' in name:
                    std *= HEAD_WEIGHT_SCALE
                value = rng.normal(0.0, std, size=shape)
            params[name] = Tensor(value, requires_grad=True, name=name)
        return cls(num_classes, widths, params)

    # -- parameters ------------------------------------------------------------
    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in self.params.items():
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()

    def copy(self) -> 'TriBranchNet':
        """Frozen snapshot: same values, no gradient tracking"""
        params = OrderedDict((name, Tensor(p.data.copy(), name=name)) for name, p in self.params.items())
        return TriBranchNet(self.num_classes, self.widths, params)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=np.float64)

    # -- forward ---------------------------------------------------------------
    def _conv(self, name: str, x: Tensor, padding: int = 1) -> Tensor:
        return nn_ops.conv2d(x, self.params[f'{name}.weight'], self.params[f'{name}.bias'], padding=padding)

    def _upsample(self, branch: str, level: str, x: Tensor) -> Tensor:
        style = UPSAMPLING[branch]
        if style == 'transposed':
            return nn_ops.transposed_conv2d(x, self.params[f'{branch}.{level}.weight'],
                                            self.params[f'{branch}.{level}.bias'], stride=2)
        upsampled = nn_ops.bilinear_upsample(x, 2) if style == 'bilinear' else nn_ops.nearest_upsample(x, 2)
        return self._conv(f'{branch}.{level}', upsampled)

    def encode(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        s1 = ops.relu(self._conv('encoder.enc1b', ops.relu(self._conv('encoder.enc1a', x))))
        h = nn_ops.maxpool2d(s1, 2)
        s2 = ops.relu(self._conv('encoder.enc2b', ops.relu(self._conv('encoder.enc2a', h))))
        h = nn_ops.maxpool2d(s2, 2)
        z = ops.relu(self._conv('encoder.bottleneck_b', ops.relu(self._conv('encoder.bottleneck_a', h))))
        return s1, s2, z

    def decode(self, branch: str, s1: Tensor, s2: Tensor, z: Tensor) -> EvidenceField:
        h = ops.relu(self._upsample(branch, 'up2', z))
        h = ops.relu(self._conv(f'{branch}.dec2', ops.concat([h, s2], axis=1)))
        h = ops.relu(self._upsample(branch, 'up1', h))
        h = ops.relu(self._conv(f'{branch}.dec1', ops.concat([h, s1], axis=1)))
        logits = self._conv(f'{branch}.head', h, padding=0)
        return EvidenceField(ops.softplus(logits))

    def forward(self, x) -> Tuple[EvidenceField, EvidenceField, EvidenceField]:
        """Evidence of (ECB, EPB, EFB) for a (B, 1, H, W) batch"""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != 1:
            raise DimensionError(f"expected input of shape (B, 1, H, W), got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise DimensionError(f"spatial dims must be divisible by 4, got {x.shape[2:]}")
        if not np.all(np.isfinite(x.data)):
            raise DimensionError("input contains non-finite values")
        s1, s2, z = self.encode(x)
        return tuple(self.decode(branch, s1, s2, z) for branch in BRANCHES)

    __call__ = forward

    # -- persistence -----------------------------------------------------------
    def save(self, path):
        atomic_write_bytes(path, encode_weights(self.num_classes, self.widths, self.state_arrays()))
        logger.info(f"Saved {len(self.params)} parameters to {path}")

    @classmethod
    def load(cls, path) -> 'TriBranchNet':
        num_classes, widths, arrays = decode_weights(Path(path).read_bytes(), source=str(path))
        params = OrderedDict((name, Tensor(value, requires_grad=True, name=name)) for name, value in arrays.items())
        return cls(num_classes, widths, params)


def encode_weights(num_classes: int, widths: Sequence[int], arrays: Dict[str, np.ndarray]) -> bytes:
    """Manifest header + one `name dims` line per parameter + blank line + ETNS tensors"""
    lines = [f"{WEIGHTS_HEADER} {WEIGHTS_VERSION} K={num_classes} widths={','.join(str(w) for w in widths)}"]
    for name, value in arrays.items():
        lines.append(' '.join([name] + [str(d) for d in np.shape(value)]))
    manifest = ('\n'.join(lines) + '\n\n').encode('utf-8')
    return manifest + b''.join(encode_tensor(value) for value in arrays.values())


def decode_weights(payload: bytes, source: str = '<bytes>') -> Tuple[int, Tuple[int, int, int], 'OrderedDict[str, np.ndarray]']:
    split = payload.find(b'\n\n')
    if split < 0:
        raise FormatError(f"{source}: missing weight manifest")
    try:
        lines = payload[:split].decode('utf-8').split('\n')
    except UnicodeDecodeError:
        raise FormatError(f"{source}: weight manifest is not UTF-8")
    header = lines[0].split()
    if len(header) != 4 or header[0] != WEIGHTS_HEADER:
        raise FormatError(f"{source}: bad weight header {lines[0]!r}")
    if header[1] != str(WEIGHTS_VERSION):
        raise FormatError(f"{source}: unsupported weight version {header[1]}")
    try:
        num_classes = int(header[2].split('=', 1)[1])
        widths = tuple(int(w) for w in header[3].split('=', 1)[1].split(','))
    except (IndexError, ValueError):
        raise FormatError(f"{source}: bad weight header {lines[0]!r}")
    if num_classes < 2 or len(widths) != 3:
        raise FormatError(f"{source}: bad architecture K={num_classes} widths={widths}")

    expected = OrderedDict(architecture(num_classes, widths))
    declared = []
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        name = parts[0]
        if name not in expected:
            raise FormatError(f"{source}: unknown parameter {name!r}", {'parameter': name})
        try:
            shape = tuple(int(d) for d in parts[1:])
        except ValueError:
            raise FormatError(f"{source}: bad dims for {name!r}", {'parameter': name})
        if shape != expected[name]:
            raise FormatError(f"{source}: {name} declared {shape}, architecture needs {expected[name]}",
                              {'parameter': name})
        declared.append(name)
    missing = [name for name in expected if name not in declared]
    if missing or declared != list(expected):
        raise FormatError(f"{source}: manifest does not list the architecture in order (missing {missing[:3]})")

    stream = io.BytesIO(payload[split + 2:])
    arrays: 'OrderedDict[str, np.ndarray]' = OrderedDict()
    for name in declared:
        value = read_tensor(stream)
        if value.shape != expected[name]:
            raise FormatError(f"{source}: tensor for {name} has shape {value.shape}", {'parameter': name})
        arrays[name] = value
    if stream.read(1):
        raise FormatError(f"{source}: trailing bytes after weights")
    return num_classes, widths, arrays
