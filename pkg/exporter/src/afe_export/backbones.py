"""Backbone and text-encoder registry backed by local weight bundles.

A vision backbone here is a frozen five-level pyramid in the engine's
encoder architecture. Pretrained backbones are weight bundles converted
offline into the engine's per-stage tensor files; this tool never
downloads anything. The `pyramid` backbone is the built-in fallback: a
seeded random pyramid that needs no files and is bit-deterministic, so
exports remain reproducible on machines without any bundles installed.
"""
from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np

from afe import tensorio
from afe.encoder import Encoder, EncoderSpec

WEIGHTS_ENV = "AFE_WEIGHTS"
DEFAULT_WEIGHTS_DIR = "~/.cache/afe/weights"
FALLBACK_BACKBONE = "pyramid"
FALLBACK_SEED = 101
FALLBACK_TEXT_ENCODER = "hashed"
TEXT_DIM = 64

# names that require a locally installed bundle, with provenance notes
VISION_BUNDLES = {
    "resnet101": "ImageNet-pretrained resnet101, distilled to pyramid stages",
    "resnext101": "ImageNet-pretrained resnext101_32x8d, distilled to pyramid stages",
}
TEXT_BUNDLES = {
    "clip-text": "vision-language text projection, distilled to a byte-histogram map",
}


class SetupError(RuntimeError):
    """A requested backbone's weights are not installed locally."""


def weights_root(weights_dir=None) -> Path:
    root = weights_dir or os.environ.get(WEIGHTS_ENV, DEFAULT_WEIGHTS_DIR)
    return Path(root).expanduser()


def _bundle_instructions(name: str, bundle_dir: Path, files: str) -> str:
    return (
        f"backbone {name!r} needs a local weight bundle at {bundle_dir}\n"
        f"to install it:\n"
        f"  1. download the pretrained checkpoint ({VISION_BUNDLES.get(name) or TEXT_BUNDLES.get(name)})\n"
        f"  2. convert it to the bundle layout described in the exporter README: {files}\n"
        f"  3. place the files under {bundle_dir} (or point --weights / ${WEIGHTS_ENV} elsewhere)\n"
        f"or use the built-in deterministic fallback instead (no downloads needed)"
    )


def _load_pyramid_bundle(bundle_dir: Path) -> Encoder:
    """Bundle layout mirrors the engine's saved encoder: meta + stage tensors."""
    fields = {}
    for line in (bundle_dir / "encoder.meta").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    spec = EncoderSpec(
        seed=int(fields["seed"]),
        in_channels=int(fields["in_channels"]),
        level_channels=tuple(int(c) for c in fields["level_channels"].split(",")),
    )
    return Encoder.load(bundle_dir, spec)


def resolve_backbone(name: str, weights_dir=None) -> Encoder:
    if name == FALLBACK_BACKBONE:
        return Encoder.build(EncoderSpec(seed=FALLBACK_SEED))
    if name not in VISION_BUNDLES:
        known = [FALLBACK_BACKBONE, *sorted(VISION_BUNDLES)]
        raise ValueError(f"unknown backbone {name!r}; known: {', '.join(known)}")
    bundle_dir = weights_root(weights_dir) / name
    if not (bundle_dir / "encoder.meta").is_file():
        raise SetupError(
            _bundle_instructions(name, bundle_dir, "encoder.meta + encoder_stage0..6.npft")
        )
    return _load_pyramid_bundle(bundle_dir)


def _byte_histogram(caption: str) -> np.ndarray:
    counts = np.zeros(256, dtype=np.float64)
    for b in caption.encode("utf-8"):
        counts[b] += 1.0
    return counts


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("embedding collapsed to the zero vector")
    return (vec / norm).astype(np.float32)


def embed_caption(caption: str, encoder_name: str = FALLBACK_TEXT_ENCODER,
                  weights_dir=None) -> np.ndarray:
    """Unit-normalized TEXT_DIM vector; identical captions embed identically."""
    if not caption or not caption.strip():
        raise ValueError("caption must be non-empty")
    if encoder_name == FALLBACK_TEXT_ENCODER:
        digest = hashlib.sha256(caption.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        vec = np.random.default_rng(seed).standard_normal(TEXT_DIM)
        return _unit(vec)
    if encoder_name not in TEXT_BUNDLES:
        known = [FALLBACK_TEXT_ENCODER, *sorted(TEXT_BUNDLES)]
        raise ValueError(f"unknown text encoder {encoder_name!r}; known: {', '.join(known)}")
    bundle_dir = weights_root(weights_dir) / encoder_name
    proj_path = bundle_dir / "projection.npft"
    if not proj_path.is_file():
        raise SetupError(
            _bundle_instructions(encoder_name, bundle_dir, "projection.npft (TEXT_DIM x 256)")
        )
    proj = tensorio.read_tensor(proj_path).astype(np.float64)
    if proj.ndim != 2 or proj.shape[1] != 256:
        raise ValueError(f"text projection must be (dim, 256), got {proj.shape}")
    return _unit(proj @ _byte_histogram(caption))
