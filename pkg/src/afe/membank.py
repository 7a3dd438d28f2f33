"""Structural branch: aggregated patch features, coreset memory bank, NN scoring.

Normal appearance is memorized as a bank of locally-averaged multi-level
feature vectors; a test pixel is anomalous to the extent its vector is
far (L1 by default) from every bank prototype. The coreset keeps the
bank small while preserving coverage (k-center greedy).
"""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np

from . import ops, tensorio

DEFAULT_LEVELS = (2, 3)
DEFAULT_FRACTION = 0.1
DEFAULT_SCALE = 2
DEFAULT_METRIC = "l1"


@dataclasses.dataclass
class MemoryBank:
    vectors: np.ndarray  # (N, C_s) float32
    coreset: np.ndarray  # (n_s,) int64 row ids
    grid_hw: tuple  # aggregated map grid (H_s, W_s)
    input_hw: tuple  # encoder input size the bank was built at
    levels: tuple
    metric: str = DEFAULT_METRIC
    fraction: float = DEFAULT_FRACTION
    seed: int = 0
    built: bool = False

    def coreset_vectors(self) -> np.ndarray:
        if not self.built:
            raise RuntimeError("memory bank has no coreset; run build-bank first")
        return self.vectors[self.coreset]


def aggregate_features(levels: dict, use_levels=DEFAULT_LEVELS) -> np.ndarray:
    """Smooth each level 3x3, resample to the coarsest grid, concat channels."""
    for k in use_levels:
        if k not in levels:
            raise ValueError(f"missing encoder level {k} for aggregation")
    coarsest = max(use_levels)
    th, tw = levels[coarsest].shape[1], levels[coarsest].shape[2]
    parts = []
    for k in use_levels:
        smoothed = ops.local_average_3x3(levels[k])
        parts.append(ops.bilinear_resample(smoothed, th, tw))
    return np.concatenate(parts, axis=0)


def _prepare_input(image: np.ndarray, input_hw: tuple) -> np.ndarray:
    """Resample an (H, W, C) raster to the structural branch input size."""
    if image.shape[:2] == tuple(input_hw):
        return image.astype(np.float32)
    chw = image.transpose(2, 0, 1)
    up = ops.bilinear_resample(chw, input_hw[0], input_hw[1])
    return up.transpose(1, 2, 0)


def aggregated_map(image: np.ndarray, encoder, use_levels=DEFAULT_LEVELS,
                   input_hw=None) -> np.ndarray:
    if input_hw is None:
        input_hw = image.shape[:2]
    feats = encoder.extract_features(_prepare_input(image, input_hw))
    return aggregate_features(feats, use_levels)


def build_bank(train_samples, encoder, use_levels=DEFAULT_LEVELS,
               scale: int = DEFAULT_SCALE) -> MemoryBank:
    """Collect every spatial vector of every training image, in (image, h, w) order."""
    if not train_samples:
        raise ValueError("training set is empty")
    first = train_samples[0].image
    input_hw = (first.shape[0] * scale, first.shape[1] * scale)
    rows = []
    grid_hw = None
    for sample in train_samples:
        fs = aggregated_map(sample.image, encoder, use_levels, input_hw)
        grid_hw = (fs.shape[1], fs.shape[2])
        rows.append(fs.reshape(fs.shape[0], -1).T)
    vectors = np.ascontiguousarray(np.concatenate(rows, axis=0), dtype=np.float32)
    return MemoryBank(
        vectors=vectors,
        coreset=np.zeros(0, dtype=np.int64),
        grid_hw=grid_hw,
        input_hw=input_hw,
        levels=tuple(use_levels),
    )


def coreset_subsample(vectors: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """k-center greedy in squared L2: farthest-point traversal from a seeded start.

    Ties resolve to the lowest row id; selection count is ceil(fraction * N).
    """
    n = vectors.shape[0]
    if n == 0:
        raise RuntimeError("memory bank is empty")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n_s = math.ceil(fraction * n)
    data = vectors.astype(np.float64)
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    selected = np.empty(n_s, dtype=np.int64)
    selected[0] = first
    diff = data - data[first]
    min_d = np.einsum("nc,nc->n", diff, diff)
    min_d[first] = -1.0  # never re-pick; real distances are >= 0
    for i in range(1, n_s):
        pick = int(np.argmax(min_d))  # first occurrence = lowest id on ties
        selected[i] = pick
        diff = data - data[pick]
        np.minimum(min_d, np.einsum("nc,nc->n", diff, diff), out=min_d)
        min_d[pick] = -1.0
    return selected


def attach_coreset(bank: MemoryBank, fraction: float, seed: int) -> MemoryBank:
    bank.coreset = coreset_subsample(bank.vectors, fraction, seed)
    bank.fraction = fraction
    bank.seed = seed
    bank.built = True
    return bank


def nn_distances(queries: np.ndarray, prototypes: np.ndarray, metric: str = DEFAULT_METRIC,
                 query_chunk: int = 128, proto_chunk: int = 2048) -> np.ndarray:
    """Min distance from each query row to the prototype rows (float64)."""
    if metric not in ("l1", "l2"):
        raise ValueError(f"metric must be l1 or l2, got {metric!r}")
    nq = queries.shape[0]
    out = np.full(nq, np.inf)
    q64 = queries.astype(np.float64)
    p64 = prototypes.astype(np.float64)
    for qs in range(0, nq, query_chunk):
        qblock = q64[qs : qs + query_chunk]
        best = np.full(qblock.shape[0], np.inf)
        for ps in range(0, p64.shape[0], proto_chunk):
            pblock = p64[ps : ps + proto_chunk]
            delta = qblock[:, None, :] - pblock[None, :, :]
            if metric == "l1":
                d = np.abs(delta).sum(axis=2)
            else:
                d = np.sqrt(np.einsum("qpc,qpc->qp", delta, delta))
            np.minimum(best, d.min(axis=1), out=best)
        out[qs : qs + query_chunk] = best
    return out


def structural_score(image: np.ndarray, encoder, bank: MemoryBank) -> np.ndarray:
    """A_str: per-pixel min distance to the coreset, upsampled to image size."""
    prototypes = bank.coreset_vectors()
    fs = aggregated_map(image, encoder, bank.levels, bank.input_hw)
    queries = fs.reshape(fs.shape[0], -1).T
    dists = nn_distances(queries, prototypes, bank.metric)
    m_s = dists.reshape(bank.grid_hw)
    return ops.bilinear_upsample(m_s.astype(np.float32), image.shape[0], image.shape[1])


def save_bank(bank_dir, bank: MemoryBank) -> None:
    bank_dir = Path(bank_dir)
    bank_dir.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor_atomic(bank_dir / "vectors.npft", bank.vectors)
    tensorio.write_tensor_atomic(
        bank_dir / "coreset.npft", bank.coreset.astype(np.float32)
    )
    meta = {
        "fraction": repr(bank.fraction),
        "seed": str(bank.seed),
        "metric": bank.metric,
        "levels": ",".join(str(k) for k in bank.levels),
        "grid_h": str(bank.grid_hw[0]),
        "grid_w": str(bank.grid_hw[1]),
        "input_h": str(bank.input_hw[0]),
        "input_w": str(bank.input_hw[1]),
        "built": "1" if bank.built else "0",
    }
    tmp = bank_dir / "meta.tmp"
    tmp.write_text("".join(f"{k} = {v}\n" for k, v in meta.items()), encoding="utf-8")
    tmp.replace(bank_dir / "meta")


def load_bank(bank_dir) -> MemoryBank:
    bank_dir = Path(bank_dir)
    meta_path = bank_dir / "meta"
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing bank metadata {meta_path}")
    meta = {}
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    vectors = tensorio.read_tensor(bank_dir / "vectors.npft")
    ids = tensorio.read_tensor(bank_dir / "coreset.npft")
    return MemoryBank(
        vectors=vectors,
        coreset=np.rint(ids).astype(np.int64),
        grid_hw=(int(meta["grid_h"]), int(meta["grid_w"])),
        input_hw=(int(meta["input_h"]), int(meta["input_w"])),
        levels=tuple(int(v) for v in meta["levels"].split(",")),
        metric=meta["metric"],
        fraction=float(meta["fraction"]),
        seed=int(meta["seed"]),
        built=meta.get("built") == "1",
    )
