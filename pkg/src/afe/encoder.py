"""Frozen multi-level convolutional feature extractor and bottleneck.

Weights are seeded random draws, never trained; the pipeline's behavior
rests on the encoder being fixed and multi-scale, not on what the
filters happen to detect. Each level is a stride-2 3x3 convolution with
half-wave rectification, so spatial resolution halves per level.
"""
from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path

import numpy as np

from . import tensorio

N_LEVELS = 5
OCE_STAGES = 2


@dataclasses.dataclass(frozen=True)
class EncoderSpec:
    """Architecture and seed; weights are a pure function of this."""

    seed: int = 101
    in_channels: int = 1
    level_channels: tuple = (8, 16, 32, 64, 64)

    def __post_init__(self):
        if len(self.level_channels) != N_LEVELS:
            raise ValueError(f"expected {N_LEVELS} level channel counts, got {self.level_channels}")
        for c in self.level_channels:
            if c < 4 or c % 4 != 0:
                raise ValueError(f"level channels must be positive multiples of 4, got {c}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")


def conv3x3_stride2(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Circularly padded 3x3 stride-2 convolution, float64 accumulation.

    x: (C_in, H, W) with H, W even; weight: (C_out, C_in, 3, 3).

    Wrap-around padding keeps border windows on the same statistics as
    interior ones; one-sided constant padding compounds over the level
    stack into rare corner features no small codebook can afford.
    """
    c_in, h, w = x.shape
    if weight.shape[1] != c_in:
        raise ValueError(f"weight expects {weight.shape[1]} input channels, got {c_in}")
    if h % 2 or w % 2:
        raise ValueError(f"stride-2 stage needs even dims, got {h}x{w}")
    padded = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1)), mode="wrap")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    windows = windows[:, ::2, ::2]  # (C_in, H/2, W/2, 3, 3)
    oh, ow = windows.shape[1], windows.shape[2]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c_in * 9)
    out = cols @ weight.astype(np.float64).reshape(weight.shape[0], -1).T
    return out.T.reshape(weight.shape[0], oh, ow)


def _rectify(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


class Encoder:
    """Immutable stack of 5 feature levels plus 2 bottleneck stages."""

    def __init__(self, spec: EncoderSpec, weights: list):
        expected = stage_shapes(spec)
        if [w.shape for w in weights] != expected:
            raise ValueError(f"stage shapes {[w.shape for w in weights]} != expected {expected}")
        self.spec = spec
        self._weights = [np.ascontiguousarray(w, dtype=np.float32) for w in weights]
        for w in self._weights:
            w.setflags(write=False)

    @classmethod
    def build(cls, spec: EncoderSpec) -> "Encoder":
        rng = np.random.default_rng(spec.seed)
        weights = []
        for shape in stage_shapes(spec):
            fan_in = shape[1] * shape[2] * shape[3]
            w = rng.standard_normal(shape) / np.sqrt(fan_in)
            weights.append(w.astype(np.float32))
        return cls(spec, weights)

    def extract_features(self, image: np.ndarray) -> dict:
        """Levels 1..5 for an (H, W, C) raster; dims must divide by 32."""
        if image.ndim != 3 or image.shape[2] != self.spec.in_channels:
            raise ValueError(
                f"expected HxWx{self.spec.in_channels} raster, got shape {image.shape}"
            )
        h, w = image.shape[0], image.shape[1]
        if h % 32 or w % 32:
            raise ValueError(f"image dims {h}x{w} must divide by 32; resize the input first")
        x = image.transpose(2, 0, 1).astype(np.float64)
        levels = {}
        for k in range(1, N_LEVELS + 1):
            x = _rectify(conv3x3_stride2(x, self._weights[k - 1]))
            levels[k] = x.astype(np.float32)
        return levels

    def oce(self, f5: np.ndarray) -> np.ndarray:
        """Compress the level-5 map through two stride-2 stages (dims quartered)."""
        c5 = self.spec.level_channels[-1]
        if f5.ndim != 3 or f5.shape[0] != c5:
            raise ValueError(f"expected a {c5}-channel level-5 map, got shape {f5.shape}")
        if f5.shape[1] % 4 or f5.shape[2] % 4:
            raise ValueError(f"level-5 dims {f5.shape[1:]} must divide by 4 for the bottleneck")
        x = f5.astype(np.float64)
        for stage in range(OCE_STAGES):
            x = _rectify(conv3x3_stride2(x, self._weights[N_LEVELS + stage]))
        return x.astype(np.float32)

    def weights_hash(self) -> str:
        digest = hashlib.sha256()
        for w in self._weights:
            digest.update(w.tobytes())
        return digest.hexdigest()

    def stage_weight(self, index: int) -> np.ndarray:
        return self._weights[index]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, w in enumerate(self._weights):
            tensorio.write_tensor_atomic(directory / f"encoder_stage{i}.npft", w)

    @classmethod
    def load(cls, directory, spec: EncoderSpec) -> "Encoder":
        directory = Path(directory)
        weights = []
        for i, shape in enumerate(stage_shapes(spec)):
            w = tensorio.read_tensor(directory / f"encoder_stage{i}.npft")
            weights.append(w.reshape(shape))
        return cls(spec, weights)


def stage_shapes(spec: EncoderSpec) -> list:
    """Weight shapes for the 5 level stages followed by the 2 bottleneck stages."""
    chans = (spec.in_channels,) + tuple(spec.level_channels)
    shapes = [(chans[i + 1], chans[i], 3, 3) for i in range(N_LEVELS)]
    c5 = spec.level_channels[-1]
    shapes += [(c5, c5, 3, 3)] * OCE_STAGES
    return shapes


PROBE_SEED = 987
MIN_MID_RMS = 0.15
MIN_TOP_RMS = 0.04


def healthy_seed(base: int, max_scan: int = 64) -> int:
    """First seed at or after ``base`` whose filters keep feature energy up.

    Cosine errors are scale free but gradient descent is not: an unlucky
    filter draw can shrink mid-level features several-fold and stall
    training at any fixed learning rate. Candidates are probed on a fixed
    noise image and draws below an RMS floor are skipped, so the choice is
    deterministic in ``base``.
    """
    rng = np.random.default_rng(PROBE_SEED)
    probe = rng.random((64, 64, 1)).astype(np.float32)
    for cand in range(base, base + max_scan):
        feats = Encoder.build(EncoderSpec(seed=cand)).extract_features(probe)
        mid = float(np.sqrt(np.mean(feats[3] ** 2)))
        top = float(np.sqrt(np.mean(feats[5] ** 2)))
        if mid >= MIN_MID_RMS and top >= MIN_TOP_RMS:
            return cand
    return base
