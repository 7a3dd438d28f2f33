"""Batch export of feature pyramids and caption embeddings.

Every image in the dataset tree (train, validation, and test splits) is
resized to the fixed preprocessing size, run through the backbone, and
written as one tensor file per requested level. The manifest with
per-file checksums is written last, after re-reading every file, so a
manifest on disk always describes verified artifacts.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from afe import dataset, ops, tensorio

from . import backbones

PREPROC_SIZE = 256
ALL_LEVELS = (1, 2, 3, 4, 5)
MANIFEST_NAME = "manifest.json"


def flat_name(sample_name: str) -> str:
    return sample_name.replace("/", "_").rsplit(".", 1)[0]


def preprocess(image: np.ndarray) -> np.ndarray:
    """(H, W, C) raster resized to the fixed export resolution."""
    h, w = image.shape[0], image.shape[1]
    if (h, w) == (PREPROC_SIZE, PREPROC_SIZE):
        return image
    chw = image.transpose(2, 0, 1)
    resized = ops.bilinear_resample(chw, PREPROC_SIZE, PREPROC_SIZE)
    return resized.transpose(1, 2, 0).astype(np.float32)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _parse_levels(levels) -> tuple:
    parsed = tuple(sorted({int(v) for v in levels}))
    if not parsed:
        raise ValueError("at least one level must be exported")
    for k in parsed:
        if k not in ALL_LEVELS:
            raise ValueError(f"level {k} outside {ALL_LEVELS[0]}..{ALL_LEVELS[-1]}")
    return parsed


def export_features(data_dir, backbone_name: str, levels, out_dir, weights_dir=None) -> Path:
    """Write one NPFT per (image, level) plus a checksum manifest; returns its path."""
    parsed = _parse_levels(levels)
    encoder = backbones.resolve_backbone(backbone_name, weights_dir)
    data_dir = Path(data_dir)
    split = dataset.read_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    files = {}
    channels = {}
    for sample in split.train + split.validation + split.test:
        feats = encoder.extract_features(preprocess(sample.image))
        for k in parsed:
            rel = f"{flat_name(sample.name)}_k{k}.npft"
            tensorio.write_tensor_atomic(out / rel, feats[k])
            files[rel] = _sha256(out / rel)
            channels[str(k)] = feats[k].shape[0]

    for rel, digest in files.items():
        if _sha256(out / rel) != digest:
            raise RuntimeError(f"checksum changed under us for {rel}")

    category = data_dir.name
    manifest = {
        "dataset_root": str(data_dir.resolve()),
        "backbone": backbone_name,
        "levels": list(parsed),
        "preprocess_size": PREPROC_SIZE,
        "text_encoder": backbones.FALLBACK_TEXT_ENCODER,
        "captions": {category: category},
        "channels": channels,
        "files": files,
    }
    manifest_path = out / MANIFEST_NAME
    tmp = manifest_path.with_name(manifest_path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(manifest_path)
    return manifest_path


def export_text_embedding(caption: str, out_file, encoder_name=None, weights_dir=None) -> np.ndarray:
    """Write the caption's unit embedding as an NPFT vector; returns it."""
    vec = backbones.embed_caption(
        caption, encoder_name or backbones.FALLBACK_TEXT_ENCODER, weights_dir
    )
    out_file = Path(out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor_atomic(out_file, vec)
    return vec
