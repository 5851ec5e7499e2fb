"""Per-branch uncertainty maps as 8-bit binary PGM images."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from etcseg.autodiff.serialization import atomic_write_bytes, load_tensor
from etcseg.errors import DimensionError, FormatError
from etcseg.services.data_service import load_image
from etcseg.services.metrics_service import boundary_band
from etcseg.services.model_service import BRANCHES, TriBranchNet
from etcseg.services.trainer_service import predict

logger = logging.getLogger(__name__)


def encode_pgm(values: np.ndarray) -> bytes:
    """u in [0, 1] -> P5 bytes; 0 maps to black, 1 to white"""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DimensionError(f"PGM needs a 2D map, got shape {values.shape}")
    pixels = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode('ascii') + pixels.tobytes()


def decode_pgm(payload: bytes) -> np.ndarray:
    tokens = []
    position = 0
    while len(tokens) < 4:
        while position < len(payload) and payload[position:position + 1].isspace():
            position += 1
        start = position
        while position < len(payload) and not payload[position:position + 1].isspace():
            position += 1
        if start == position:
            raise FormatError("truncated PGM header")
        tokens.append(payload[start:position].decode('ascii'))
    if tokens[0] != 'P5' or tokens[3] != '255':
        raise FormatError(f"not an 8-bit P5 image: {tokens}")
    width, height = int(tokens[1]), int(tokens[2])
    body = payload[position + 1:]
    if len(body) != width * height:
        raise FormatError(f"PGM body holds {len(body)} bytes, expected {width * height}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def uncertainty_maps(net: TriBranchNet, image: np.ndarray) -> Dict[str, np.ndarray]:
    predictions = predict(net, image)
    return {branch: predictions[branch].uncertainty for branch in BRANCHES}


def export_uncertainty(weights_path, sample_path, out_dir) -> Dict[str, Path]:
    """Write u_ecb.pgm, u_epb.pgm and u_efb.pgm for one sample

    When the sample's label map sits next to it, band_means.json records mean u
    near class boundaries and elsewhere for each branch.
    """
    net = TriBranchNet.load(weights_path)
    image = load_image(sample_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = uncertainty_maps(net, image)
    written = {}
    for branch, u in maps.items():
        path = out_dir / f'u_{branch}.pgm'
        atomic_write_bytes(path, encode_pgm(u))
        written[branch] = path
        logger.info(f"{branch}: mean u {float(u.mean()):.4f} -> {path}")

    label_path = label_path_for(sample_path)
    if label_path != Path(sample_path) and label_path.is_file():
        label = load_tensor(label_path)
        if label.shape != image.shape[1:]:
            raise DimensionError(f"{label_path}: label shape {label.shape} does not match image {image.shape[1:]}")
        bands = {}
        for branch, u in maps.items():
            near, far = band_means(u, label)
            bands[branch] = {'boundary': near, 'interior': far}
        path = out_dir / 'band_means.json'
        atomic_write_bytes(path, json.dumps(bands, indent=2, sort_keys=True).encode('utf-8'))
        written['band_means'] = path
    return written


def band_means(u: np.ndarray, label: np.ndarray, width: int = 1) -> Tuple[Optional[float], Optional[float]]:
    """(mean u within ``width`` pixels of a class boundary, mean u elsewhere); None for an empty set"""
    band = boundary_band(label, width)
    near = float(u[band].mean()) if band.any() else None
    far = float(u[~band].mean()) if (~band).any() else None
    return near, far


def label_path_for(sample_path) -> Path:
    """img_00000.etns -> lab_00000.etns in the same split directory"""
    sample_path = Path(sample_path)
    return sample_path.with_name(sample_path.name.replace('img_', 'lab_', 1))
