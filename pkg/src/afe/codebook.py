"""Per-level discrete codebooks of normal features.

Each encoder level k gets a context projector (fixed dilated averaging
plus one learnable linear map) and a codebook of d entries. Features
are replaced by their nearest entry; the backward pass treats that
replacement as the identity (straight-through), so reconstruction
losses reach the projector while the codebook itself learns only from
the two-term quantization loss.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import ops, tensorio

DILATION_RATES = (1, 2, 4)
DEFAULT_ENTRIES = 16
DEFAULT_LR = 0.1
DEFAULT_EPOCHS = 50


@dataclasses.dataclass
class ContextProjector:
    """Linear map from concatenated dilated context (3C channels) to C/4."""

    level: int
    weight: np.ndarray  # (C/4, 3C) float32, no bias

    def __post_init__(self):
        if self.weight.ndim != 2 or self.weight.shape[1] % 3 != 0:
            raise ValueError(f"projector weight must be (C/4, 3C), got {self.weight.shape}")

    @classmethod
    def create(cls, level: int, channels: int, seed: int) -> "ContextProjector":
        if channels % 4 != 0:
            raise ValueError(f"level channels must divide by 4, got {channels}")
        rng = np.random.default_rng((seed, level, 0))
        w = rng.standard_normal((channels // 4, 3 * channels)) / np.sqrt(3 * channels)
        return cls(level, w.astype(np.float32))


@dataclasses.dataclass
class CodebookLevel:
    """d normal-feature prototypes for one encoder level."""

    level: int
    entries: np.ndarray  # (d, C/4) float32

    def __post_init__(self):
        if self.entries.ndim != 2 or self.entries.shape[0] == 0:
            raise RuntimeError(f"codebook level {self.level} is empty or malformed")


@dataclasses.dataclass(frozen=True)
class QuantizedMap:
    e: np.ndarray  # (C/4, H, W) float32
    indices: np.ndarray  # (H, W) int64


def dilated_context(f: np.ndarray) -> np.ndarray:
    """Concatenate 3x3 dilated averages at rates 1, 2, 4 (float32)."""
    if f.ndim != 3:
        raise ValueError(f"expected C,H,W feature map, got shape {f.shape}")
    return np.concatenate([ops.dilated_average_3x3(f, r) for r in DILATION_RATES], axis=0)


def context_project(f: np.ndarray, proj: ContextProjector) -> np.ndarray:
    """Project a level-k feature map to C/4 channels via its dilated context."""
    z, _ = context_project_forward(f, proj)
    return z


def context_project_forward(f: np.ndarray, proj: ContextProjector):
    """Returns (z, cache); cache feeds :func:`context_project_backward`."""
    ctx = dilated_context(f)
    if ctx.shape[0] != proj.weight.shape[1]:
        raise ValueError(
            f"projector expects {proj.weight.shape[1]} context channels, got {ctx.shape[0]}"
        )
    z = np.tensordot(proj.weight.astype(np.float64), ctx.astype(np.float64), axes=(1, 0))
    return z.astype(np.float32), ctx


def context_project_backward(ctx: np.ndarray, grad_z: np.ndarray) -> np.ndarray:
    """Gradient of the projection weight given dL/dz (float64)."""
    return np.tensordot(grad_z.astype(np.float64), ctx.astype(np.float64), axes=((1, 2), (1, 2)))


def quantize(z: np.ndarray, cb: CodebookLevel) -> QuantizedMap:
    """Replace each spatial vector by its nearest entry (squared L2, ties low).

    e keeps the entries' dtype so selected vectors match them bitwise.
    """
    if cb.entries.size == 0:
        raise RuntimeError(f"codebook level {cb.level} has no entries")
    if z.ndim != 3 or z.shape[0] != cb.entries.shape[1]:
        raise ValueError(
            f"projected map has {z.shape[0] if z.ndim == 3 else '?'} channels,"
            f" codebook stores {cb.entries.shape[1]}"
        )
    c, h, w = z.shape
    flat = z.reshape(c, h * w).T.astype(np.float64)
    diff = flat[:, None, :] - cb.entries.astype(np.float64)[None, :, :]
    dists = np.einsum("nmc,nmc->nm", diff, diff)
    indices = np.argmin(dists, axis=1)  # first occurrence = lowest index on ties
    e = cb.entries[indices].T.reshape(c, h, w)
    return QuantizedMap(e=e, indices=indices.reshape(h, w).astype(np.int64))


def vq_loss(z: np.ndarray, q: QuantizedMap, n_entries: int):
    """Two-term quantization loss with analytic gradients.

    loss = mean over locations of (|sg[z] - e|^2 + |z - sg[e]|^2); the
    stop-gradient convention makes grad_z carry only the commitment term
    and grad_entries only the codebook term.
    """
    if z.shape != q.e.shape:
        raise ValueError(f"projected map {z.shape} and quantized map {q.e.shape} differ")
    c, h, w = z.shape
    n = h * w
    diff = z.astype(np.float64) - q.e.astype(np.float64)
    loss = 2.0 * float(np.sum(diff * diff)) / n
    grad_z = 2.0 * diff / n
    grad_entries = np.zeros((n_entries, c), dtype=np.float64)
    flat_diff = diff.reshape(c, n).T
    np.add.at(grad_entries, q.indices.reshape(n), -2.0 * flat_diff / n)
    return loss, grad_entries, grad_z


def straight_through(grad_e: np.ndarray) -> np.ndarray:
    """Backward of quantization: the gradient at e passes to z unchanged."""
    return grad_e


def mean_quantization_error(z: np.ndarray, q: QuantizedMap) -> float:
    diff = z.astype(np.float64) - q.e.astype(np.float64)
    return float(np.sum(diff * diff)) / (z.shape[1] * z.shape[2])


def init_codebook(level: int, z_first: np.ndarray, d: int, seed: int) -> CodebookLevel:
    """Seed entries by sampling d positions of the first projected map.

    Sampling by position weights entries by feature frequency, so the
    starting set already covers the bulk of the normal manifold."""
    c, h, w = z_first.shape
    n = h * w
    if n < d:
        raise ValueError(f"first map offers {n} vectors, need {d} for initialization")
    rng = np.random.default_rng((seed, level, 1))
    picks = rng.choice(n, size=d, replace=False)
    entries = z_first.reshape(c, n).T[picks].astype(np.float32)
    return CodebookLevel(level, entries.copy())


def train_codebooks(
    feature_stream: list,
    levels=(1, 2, 3, 4),
    level_channels=(8, 16, 32, 64),
    d: int = DEFAULT_ENTRIES,
    lr: float = DEFAULT_LR,
    epochs: int = DEFAULT_EPOCHS,
    seed: int = 0,
):
    """Fit codebooks and projectors on normal features by plain gradient descent.

    feature_stream: list of per-image dicts {level: f_E^k}. Returns
    (codebooks, projectors, errors) where errors[level] holds the mean
    quantization error measured over the stream after each epoch.
    """
    if not feature_stream:
        raise ValueError("feature stream is empty")
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    projectors = {
        k: ContextProjector.create(k, c, seed) for k, c in zip(levels, level_channels)
    }
    codebooks = {}
    for k in levels:
        z0 = context_project(feature_stream[0][k], projectors[k])
        codebooks[k] = init_codebook(k, z0, d, seed)
    errors = {k: [] for k in levels}
    for _ in range(epochs):
        assigned = {k: np.zeros(d, dtype=np.int64) for k in levels}
        worst = {k: [] for k in levels}  # (distance, vector) candidates for dead entries
        for feats in feature_stream:
            for k in levels:
                z, ctx = context_project_forward(feats[k], projectors[k])
                q = quantize(z, codebooks[k])
                _, grad_entries, grad_z = vq_loss(z, q, d)
                if lr > 0:
                    codebooks[k].entries = (
                        codebooks[k].entries.astype(np.float64) - lr * grad_entries
                    ).astype(np.float32)
                    grad_w = context_project_backward(ctx, grad_z)
                    projectors[k].weight = (
                        projectors[k].weight.astype(np.float64) - lr * grad_w
                    ).astype(np.float32)
                assigned[k] += np.bincount(q.indices.reshape(-1), minlength=d)
                dists = np.sum((z.astype(np.float64) - q.e) ** 2, axis=0).reshape(-1)
                order = np.argsort(dists)[::-1][:d]
                flat = z.reshape(z.shape[0], -1).T
                worst[k].extend((float(dists[i]), flat[i].copy()) for i in order)
        if lr > 0:
            for k in levels:
                _revive_dead_entries(codebooks[k], assigned[k], worst[k])
        for k in levels:
            total, count = 0.0, 0
            for feats in feature_stream:
                z = context_project(feats[k], projectors[k])
                q = quantize(z, codebooks[k])
                total += mean_quantization_error(z, q) * z.shape[1] * z.shape[2]
                count += z.shape[1] * z.shape[2]
            errors[k].append(total / count)
    return codebooks, projectors, errors


def _revive_dead_entries(cb: CodebookLevel, assigned: np.ndarray, candidates: list) -> None:
    """Move entries unassigned for a whole epoch onto the worst-quantized vectors."""
    dead = [j for j in range(len(assigned)) if assigned[j] == 0]
    if not dead:
        return
    candidates.sort(key=lambda t: -t[0])
    entries = cb.entries.astype(np.float32)
    used = []
    for j in dead:
        for _, vec in candidates:
            v = vec.astype(np.float32)
            if any(np.array_equal(v, u) for u in used):
                continue
            entries[j] = v
            used.append(v)
            break
    cb.entries = entries


def save_codebooks(model_dir, codebooks: dict, projectors: dict) -> None:
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    for k, cb in codebooks.items():
        tensorio.write_tensor_atomic(model_dir / f"codebook_k{k}.npft", cb.entries)
    for k, proj in projectors.items():
        tensorio.write_tensor_atomic(model_dir / f"theta_k{k}.npft", proj.weight)


def load_codebooks(model_dir, levels):
    model_dir = Path(model_dir)
    codebooks, projectors = {}, {}
    for k in levels:
        codebooks[k] = CodebookLevel(k, tensorio.read_tensor(model_dir / f"codebook_k{k}.npft"))
        projectors[k] = ContextProjector(k, tensorio.read_tensor(model_dir / f"theta_k{k}.npft"))
    return codebooks, projectors
