"""Reconstruction decoder guided by quantized normal features and a global prior.

The decoder never sees the raw test image below the bottleneck: each
level fuses (a) the previous level's output, (b) an input-independent
per-category context vector, and (c) the codebook-quantized features.
Anomalous content therefore cannot steer the reconstruction, and the
cosine gap between encoder and decoder features becomes the logical
anomaly map.

All forward/backward math runs in float64 on parameters that may be
float64 masters (training) or float32 (loaded models); gradients are
exact analytic derivatives, which the test suite checks against central
finite differences.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import codebook as cb
from . import ops, tensorio

DEFAULT_DG = 64
DEFAULT_LAMBDAS = (1.0, 1.0, 1.0)
DEFAULT_LR = 1e-4
DEFAULT_EPOCHS = 50
RECON_LEVELS = (4, 3, 2, 1)
ZERO_NORM = 1e-12


class TrainingError(RuntimeError):
    """Raised when training diverges; carries the last finite checkpoint."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclasses.dataclass(frozen=True)
class LossBundle:
    l_cos: float
    l_mse: float
    l_vq: float
    l_total: float


@dataclasses.dataclass
class DecoderModel:
    """Parameters plus the metadata needed to rebuild shapes at load time."""

    level_channels: tuple  # C^1..C^5
    in_channels: int
    d_g: int
    d_entries: int
    lambdas: tuple
    params: dict
    categories: tuple
    trained: bool = False

    def block_in_channels(self, k: int) -> int:
        prev = self.level_channels[4] if k == 4 else self.level_channels[k]
        return prev + self.d_g + self.level_channels[k - 1] // 4


def init_model(
    level_channels=(8, 16, 32, 64, 64),
    in_channels: int = 1,
    d_g: int = DEFAULT_DG,
    d_entries: int = cb.DEFAULT_ENTRIES,
    lambdas=DEFAULT_LAMBDAS,
    categories=("default",),
    seed: int = 0,
) -> DecoderModel:
    """Seeded init: weights scaled by 1/sqrt(fan-in), biases zero."""
    rng = np.random.default_rng((seed, 7))
    model = DecoderModel(
        level_channels=tuple(level_channels),
        in_channels=in_channels,
        d_g=d_g,
        d_entries=d_entries,
        lambdas=tuple(float(v) for v in lambdas),
        params={},
        categories=tuple(categories),
    )
    blocks = {}
    for k in RECON_LEVELS:
        c_out = level_channels[k - 1]
        c_in = model.block_in_channels(k)
        hidden = 2 * c_out
        blocks[k] = {
            "w1": rng.standard_normal((hidden, c_in)) / np.sqrt(c_in),
            "b1": np.zeros(hidden),
            "w2": rng.standard_normal((c_out, hidden)) / np.sqrt(hidden),
            "b2": np.zeros(c_out),
        }
    model.params = {
        "blocks": blocks,
        "pixel_w": rng.standard_normal((in_channels, level_channels[0]))
        / np.sqrt(level_channels[0]),
        "pixel_b": np.zeros(in_channels),
        "g": {cat: rng.standard_normal(d_g) / np.sqrt(d_g) for cat in categories},
        "adapter": None,  # created lazily: (d_g, embedding dim), zero-init
    }
    return model


def global_context(model: DecoderModel, category: str, external_embedding=None) -> np.ndarray:
    """Per-category context vector; constant at inference by construction."""
    if external_embedding is not None:
        emb = np.asarray(external_embedding, dtype=np.float64).reshape(-1)
        adapter = ensure_adapter(model, emb.size)
        return adapter.astype(np.float64) @ emb
    if category not in model.params["g"]:
        raise ValueError(f"unknown category {category!r}; registered: {model.categories}")
    return np.asarray(model.params["g"][category], dtype=np.float64)


def ensure_adapter(model: DecoderModel, embedding_dim: int) -> np.ndarray:
    adapter = model.params.get("adapter")
    if adapter is None:
        adapter = np.zeros((model.d_g, embedding_dim))
        model.params["adapter"] = adapter
    if adapter.shape != (model.d_g, embedding_dim):
        raise ValueError(
            f"adapter maps {adapter.shape[1]}-dim embeddings, got {embedding_dim}"
        )
    return adapter


# ---------------------------------------------------------------------------
# Pointwise fusion blocks

def block_forward(block: dict, in_map: np.ndarray):
    """in_map: (C_in, H, W) float64 -> (out, cache)."""
    c_in, h, w = in_map.shape
    flat = in_map.reshape(c_in, h * w)
    h_pre = block["w1"].astype(np.float64) @ flat + np.asarray(block["b1"], dtype=np.float64)[:, None]
    h_act = np.maximum(h_pre, 0.0)
    out = block["w2"].astype(np.float64) @ h_act + np.asarray(block["b2"], dtype=np.float64)[:, None]
    c_out = out.shape[0]
    cache = (flat, h_pre, h_act, (h, w))
    return out.reshape(c_out, h, w), cache


def block_backward(block: dict, cache, grad_out: np.ndarray):
    """Returns (grads dict, grad_in of shape (C_in, H, W))."""
    flat, h_pre, h_act, (h, w) = cache
    go = grad_out.reshape(grad_out.shape[0], h * w)
    grads = {
        "w2": go @ h_act.T,
        "b2": go.sum(axis=1),
    }
    gh = block["w2"].astype(np.float64).T @ go
    gh *= h_pre > 0
    grads["w1"] = gh @ flat.T
    grads["b1"] = gh.sum(axis=1)
    grad_in = block["w1"].astype(np.float64).T @ gh
    return grads, grad_in.reshape(-1, h, w)


# ---------------------------------------------------------------------------
# Decode

def decode(model: DecoderModel, bottleneck: np.ndarray, g: np.ndarray, e_maps: dict):
    """Reconstruct per-level features and the image; returns (f_d, x', caches).

    e_maps: {k: (C^k/4, H^k, W^k)} for k = 4..1. The level-k grid is
    inferred from e_maps; the bottleneck is upsampled onto the level-4
    grid to start the cascade.
    """
    for k in RECON_LEVELS:
        if k not in e_maps:
            raise ValueError(f"missing quantized map for level {k}")
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if g.size != model.d_g:
        raise ValueError(f"context vector has dim {g.size}, model expects {model.d_g}")
    caches = {"levels": {}, "shapes": {}}
    h4, w4 = e_maps[4].shape[1], e_maps[4].shape[2]
    prev = ops.resample_f64(np.asarray(bottleneck, dtype=np.float64), h4, w4)
    f_d = {}
    for k in RECON_LEVELS:
        e = np.asarray(e_maps[k], dtype=np.float64)
        hk, wk = e.shape[1], e.shape[2]
        if k != 4:
            caches["shapes"][k] = prev.shape  # pre-upsample shape for the adjoint
            prev = ops.resample_f64(prev, hk, wk)
        gb = np.broadcast_to(g[:, None, None], (model.d_g, hk, wk))
        in_map = np.concatenate([prev, gb, e], axis=0)
        out, cache = block_forward(model.params["blocks"][k], in_map)
        caches["levels"][k] = (cache, prev.shape[0], e.shape[0])
        f_d[k] = out
        prev = out
    return f_d, caches


def pixel_head(model: DecoderModel, f_d1: np.ndarray, image_h: int, image_w: int):
    up = ops.resample_f64(f_d1, image_h, image_w)
    flat = up.reshape(up.shape[0], image_h * image_w)
    w = np.asarray(model.params["pixel_w"], dtype=np.float64)
    b = np.asarray(model.params["pixel_b"], dtype=np.float64)
    x = w @ flat + b[:, None]
    return x.reshape(w.shape[0], image_h, image_w), (up, flat)


# ---------------------------------------------------------------------------
# Cosine error

def cosine_error_map(fe: np.ndarray, fd: np.ndarray) -> np.ndarray:
    """1 - cosine similarity per pixel; zero vectors score 0 (both) or 1 (one)."""
    m, _ = _cosine_forward(np.asarray(fe, dtype=np.float64), np.asarray(fd, dtype=np.float64))
    return m.astype(np.float32)


def _cosine_forward(fe: np.ndarray, fd: np.ndarray):
    if fe.shape != fd.shape:
        raise ValueError(f"feature shapes differ: {fe.shape} vs {fd.shape}")
    dot = np.sum(fe * fd, axis=0)
    ne = np.sqrt(np.sum(fe * fe, axis=0))
    nd = np.sqrt(np.sum(fd * fd, axis=0))
    valid = (ne >= ZERO_NORM) & (nd >= ZERO_NORM)
    both_zero = (ne < ZERO_NORM) & (nd < ZERO_NORM)
    denom = np.where(valid, ne * nd, 1.0)
    cos = np.where(valid, dot / denom, 0.0)
    m = np.where(valid, 1.0 - cos, np.where(both_zero, 0.0, 1.0))
    return m, (dot, ne, nd, valid, cos)


def _cosine_backward(fe: np.ndarray, fd: np.ndarray, cache, grad_m: np.ndarray) -> np.ndarray:
    """d(sum grad_m * M)/d fd; zero on degenerate pixels (flat regions)."""
    dot, ne, nd, valid, cos = cache
    safe_nd = np.where(valid, nd, 1.0)
    safe_prod = np.where(valid, ne * nd, 1.0)
    dcos_dfd = fe / safe_prod - fd * (cos / (safe_nd * safe_nd))
    return np.where(valid, -grad_m * dcos_dfd, 0.0)


# ---------------------------------------------------------------------------
# Losses

def loss_bundle(fe_levels: dict, fd_levels: dict, x: np.ndarray, x_prime: np.ndarray,
                l_vq: float, lambdas=DEFAULT_LAMBDAS):
    """LossBundle plus gradients d l_total / d f_D^k and d l_total / d x'."""
    for name, tensor in [("x", x), ("x_prime", x_prime)] + [
        (f"f_E^{k}", fe_levels[k]) for k in fe_levels
    ] + [(f"f_D^{k}", fd_levels[k]) for k in fd_levels]:
        if not np.all(np.isfinite(tensor)):
            raise FloatingPointError(f"non-finite values in {name}")
    lam1, lam2, lam3 = (float(v) for v in lambdas)
    l_cos = 0.0
    grad_fd = {}
    for k in RECON_LEVELS:
        fe = np.asarray(fe_levels[k], dtype=np.float64)
        fd = np.asarray(fd_levels[k], dtype=np.float64)
        m, cache = _cosine_forward(fe, fd)
        n = m.size
        l_cos += float(m.sum()) / n
        grad_fd[k] = _cosine_backward(fe, fd, cache, np.full(m.shape, lam1 / n))
    x64 = np.asarray(x, dtype=np.float64)
    xp64 = np.asarray(x_prime, dtype=np.float64)
    if x64.shape != xp64.shape:
        raise ValueError(f"image shapes differ: {x64.shape} vs {xp64.shape}")
    diff = xp64 - x64
    l_mse = float(np.sum(diff * diff)) / diff.size
    grad_xp = lam2 * 2.0 * diff / diff.size
    l_total = lam1 * l_cos + lam2 * l_mse + lam3 * float(l_vq)
    bundle = LossBundle(l_cos=l_cos, l_mse=l_mse, l_vq=float(l_vq), l_total=l_total)
    return bundle, grad_fd, grad_xp


# ---------------------------------------------------------------------------
# Full training step (decode + losses + all parameter gradients)

def training_step(model: DecoderModel, encoder_feats: dict, bottleneck: np.ndarray,
                  category: str, codebooks: dict, projectors: dict, image: np.ndarray,
                  external_embedding=None):
    """Forward + backward for one image.

    Returns (bundle, grads) where grads holds entries for every learnable
    tensor: blocks, pixel head, g (or adapter), projector weights, and
    codebook entries. encoder_feats: {k: f_E^k}; image: (C, H, W) float.
    """
    lam1, lam2, lam3 = model.lambdas
    g = global_context(model, category, external_embedding)
    ctx_caches, e_maps = {}, {}
    l_vq = 0.0
    vq_grad_entries, vq_grad_z = {}, {}
    for k in RECON_LEVELS:
        z, ctx = cb.context_project_forward(encoder_feats[k], projectors[k])
        z = z.astype(np.float64)
        ctx_caches[k] = ctx
        q = cb.quantize(z, codebooks[k])
        e_maps[k] = q.e
        loss_k, ge, gz = cb.vq_loss(z, q, codebooks[k].entries.shape[0])
        l_vq += loss_k
        vq_grad_entries[k] = ge
        vq_grad_z[k] = gz
    f_d, caches = decode(model, bottleneck, g, e_maps)
    h, w = image.shape[1], image.shape[2]
    x_prime, (up1, _) = pixel_head(model, f_d[1], h, w)
    bundle, grad_fd, grad_xp = loss_bundle(encoder_feats, f_d, image, x_prime, l_vq, model.lambdas)

    grads = {"blocks": {}, "g": None, "adapter": None, "theta": {}, "entries": {}}
    # pixel head backward
    gxp = grad_xp.reshape(grad_xp.shape[0], h * w)
    flat_up = up1.reshape(up1.shape[0], h * w)
    grads["pixel_w"] = gxp @ flat_up.T
    grads["pixel_b"] = gxp.sum(axis=1)
    grad_up = np.asarray(model.params["pixel_w"], dtype=np.float64).T @ gxp
    grad_f1_extra = ops.upsample_adjoint(
        grad_up.reshape(-1, h, w), f_d[1].shape[1], f_d[1].shape[2]
    )

    grad_g = np.zeros(model.d_g)
    grad_prev = None  # gradient flowing into f_D^{k+1} from the level-k input
    grad_e = {}
    for k in (1, 2, 3, 4):
        grad_out = grad_fd[k].copy()
        if k == 1:
            grad_out += grad_f1_extra
        if grad_prev is not None:
            grad_out += grad_prev
        cache, prev_ch, e_ch = caches["levels"][k]
        bgrads, grad_in = block_backward(model.params["blocks"][k], cache, grad_out)
        grads["blocks"][k] = bgrads
        grad_prev_up = grad_in[:prev_ch]
        grad_g += grad_in[prev_ch : prev_ch + model.d_g].sum(axis=(1, 2))
        grad_e[k] = grad_in[prev_ch + model.d_g :]
        if k != 4:
            src_shape = caches["shapes"][k]
            grad_prev = ops.upsample_adjoint(grad_prev_up, src_shape[1], src_shape[2])
        else:
            grad_prev = None  # ends at the frozen bottleneck

    if external_embedding is not None:
        emb = np.asarray(external_embedding, dtype=np.float64).reshape(-1)
        grads["adapter"] = np.outer(grad_g, emb)
    else:
        grads["g"] = grad_g

    for k in RECON_LEVELS:
        # straight-through: downstream gradient at e passes to z unchanged
        grad_z = cb.straight_through(grad_e[k]).copy()
        grad_z += lam3 * vq_grad_z[k]
        grads["entries"][k] = lam3 * vq_grad_entries[k]
        grads["theta"][k] = cb.context_project_backward(ctx_caches[k], grad_z)
    return bundle, grads


def sgd_update(model: DecoderModel, codebooks: dict, projectors: dict, grads: dict,
               lr: float, codebook_lr: float, train_theta: bool = True) -> None:
    for k, bgrads in grads["blocks"].items():
        block = model.params["blocks"][k]
        for name, gval in bgrads.items():
            block[name] = np.asarray(block[name], dtype=np.float64) - lr * gval
    model.params["pixel_w"] = np.asarray(model.params["pixel_w"], dtype=np.float64) - lr * grads["pixel_w"]
    model.params["pixel_b"] = np.asarray(model.params["pixel_b"], dtype=np.float64) - lr * grads["pixel_b"]
    if train_theta:
        for k, gw in grads["theta"].items():
            projectors[k].weight = np.asarray(projectors[k].weight, dtype=np.float64) - lr * gw
    for k, ge in grads["entries"].items():
        codebooks[k].entries = np.asarray(codebooks[k].entries, dtype=np.float64) - codebook_lr * ge


def train_logical(dataset, encoder, config, category: str = "default",
                  external_embedding=None, log=None, feature_source=None):
    """Train decoder, codebooks, projectors, and context on normal images.

    config: TrainConfig-like object with fields d_entries, d_g, lambdas,
    lr, codebook_lr, epochs, seed, joint_theta. feature_source, when
    given, maps a sample to its level dict {1..5} in place of running
    the encoder; the bottleneck still comes from the encoder's level-5
    compression. Returns (model, codebooks, projectors, loss_curve).
    """
    if not dataset.train:
        raise ValueError("training split is empty")
    spec = encoder.spec
    feats, bottles, images = [], [], []
    for sample in dataset.train:
        if feature_source is None:
            levels = encoder.extract_features(sample.image)
        else:
            levels = feature_source(sample)
        feats.append(levels)
        bottles.append(encoder.oce(levels[5]))
        images.append(sample.image.transpose(2, 0, 1).astype(np.float64))

    model = init_model(
        level_channels=spec.level_channels,
        in_channels=spec.in_channels,
        d_g=config.d_g,
        d_entries=config.d_entries,
        lambdas=config.lambdas,
        categories=(category,),
        seed=config.seed,
    )
    projectors = {
        k: cb.ContextProjector.create(k, spec.level_channels[k - 1], config.seed)
        for k in RECON_LEVELS
    }
    codebooks = {}
    for k in RECON_LEVELS:
        z0 = cb.context_project(feats[0][k], projectors[k])
        codebooks[k] = cb.init_codebook(k, z0.astype(np.float64), config.d_entries, config.seed)
        codebooks[k].entries = codebooks[k].entries.astype(np.float64)

    loss_curve = []
    last_good = None
    for epoch in range(config.epochs):
        total = 0.0
        for feats_i, bottle_i, image_i in zip(feats, bottles, images):
            try:
                bundle, grads = training_step(
                    model, feats_i, bottle_i, category, codebooks, projectors, image_i,
                    external_embedding=external_embedding,
                )
            except FloatingPointError as exc:
                raise TrainingError(
                    f"training diverged in epoch {epoch}: {exc}", checkpoint=last_good
                ) from exc
            if not np.isfinite(bundle.l_total):
                raise TrainingError(
                    f"loss diverged to {bundle.l_total} in epoch {epoch}",
                    checkpoint=last_good,
                )
            total += bundle.l_total
            if external_embedding is not None:
                adapter = ensure_adapter(model, np.size(external_embedding))
                model.params["adapter"] = np.asarray(adapter, dtype=np.float64) - config.lr * grads["adapter"]
            else:
                model.params["g"][category] = (
                    np.asarray(model.params["g"][category], dtype=np.float64)
                    - config.lr * grads["g"]
                )
            if not config.joint_theta:
                # restrict theta updates to the commitment-term gradient
                for k in RECON_LEVELS:
                    z, ctx = cb.context_project_forward(feats_i[k], projectors[k])
                    q = cb.quantize(z.astype(np.float64), codebooks[k])
                    _, _, gz = cb.vq_loss(z.astype(np.float64), q, config.d_entries)
                    grads["theta"][k] = model.lambdas[2] * cb.context_project_backward(ctx, gz)
            sgd_update(model, codebooks, projectors, grads, config.lr, config.codebook_lr)
        loss_curve.append(total / len(feats))
        if log is not None:
            log.debug("epoch %d mean l_total %.6f", epoch, loss_curve[-1])
        last_good = snapshot_params(model, codebooks, projectors)
    model.trained = config.epochs > 0
    return model, codebooks, projectors, loss_curve


def snapshot_params(model: DecoderModel, codebooks: dict, projectors: dict) -> dict:
    return {
        "model": {
            "blocks": {
                k: {n: np.array(v, dtype=np.float64) for n, v in blk.items()}
                for k, blk in model.params["blocks"].items()
            },
            "pixel_w": np.array(model.params["pixel_w"], dtype=np.float64),
            "pixel_b": np.array(model.params["pixel_b"], dtype=np.float64),
            "g": {c: np.array(v, dtype=np.float64) for c, v in model.params["g"].items()},
            "adapter": (
                np.array(model.params["adapter"], dtype=np.float64)
                if model.params.get("adapter") is not None
                else None
            ),
        },
        "entries": {k: np.array(v.entries, dtype=np.float64) for k, v in codebooks.items()},
        "theta": {k: np.array(p.weight, dtype=np.float64) for k, p in projectors.items()},
    }


# ---------------------------------------------------------------------------
# Scoring

def logical_score(image: np.ndarray, encoder, model: DecoderModel, codebooks: dict,
                  projectors: dict, category: str = "default", external_embedding=None,
                  use_quantized: bool = True, return_levels: bool = False,
                  features: dict = None):
    """A_log = sum over levels of the upsampled cosine error map.

    features, when given, supplies the level dict {1..5} in place of
    running the encoder on the image.
    """
    if not model.trained:
        raise RuntimeError("model is untrained; run training before scoring")
    levels = encoder.extract_features(image) if features is None else features
    bottleneck = encoder.oce(levels[5])
    g = global_context(model, category, external_embedding)
    e_maps = {}
    for k in RECON_LEVELS:
        z = cb.context_project(levels[k], projectors[k]).astype(np.float64)
        e_maps[k] = cb.quantize(z, codebooks[k]).e.astype(np.float64) if use_quantized else z
    f_d, _ = decode(model, bottleneck, g, e_maps)
    h, w = image.shape[0], image.shape[1]
    a_log = np.zeros((h, w), dtype=np.float64)
    per_level = {}
    for k in RECON_LEVELS:
        m, _ = _cosine_forward(levels[k].astype(np.float64), f_d[k])
        per_level[k] = m
        a_log += ops.resample_f64(m, h, w)
    a_log32 = a_log.astype(np.float32)
    if return_levels:
        return a_log32, per_level
    return a_log32


# ---------------------------------------------------------------------------
# Persistence

def save_model(model_dir, model: DecoderModel, codebooks: dict, projectors: dict) -> None:
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    p = model.params
    for k, blk in p["blocks"].items():
        for name, value in blk.items():
            tensorio.write_tensor_atomic(
                model_dir / f"block{k}_{name}.npft", np.asarray(value, dtype=np.float32)
            )
    tensorio.write_tensor_atomic(model_dir / "pixel_w.npft", np.asarray(p["pixel_w"], dtype=np.float32))
    tensorio.write_tensor_atomic(model_dir / "pixel_b.npft", np.asarray(p["pixel_b"], dtype=np.float32))
    for i, cat in enumerate(model.categories):
        tensorio.write_tensor_atomic(
            model_dir / f"g_{i}.npft", np.asarray(p["g"][cat], dtype=np.float32)
        )
    if p.get("adapter") is not None:
        tensorio.write_tensor_atomic(
            model_dir / "adapter.npft", np.asarray(p["adapter"], dtype=np.float32)
        )
    cb.save_codebooks(model_dir, codebooks, projectors)
    meta = {
        "level_channels": ",".join(str(c) for c in model.level_channels),
        "in_channels": str(model.in_channels),
        "d_g": str(model.d_g),
        "d_entries": str(model.d_entries),
        "lambda1": repr(model.lambdas[0]),
        "lambda2": repr(model.lambdas[1]),
        "lambda3": repr(model.lambdas[2]),
        "categories": ",".join(model.categories),
        "trained": "1" if model.trained else "0",
    }
    text = "".join(f"{key} = {value}\n" for key, value in meta.items())
    tmp = model_dir / "model.meta.tmp"
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(model_dir / "model.meta")


def load_model(model_dir):
    """Returns (model, codebooks, projectors) with float32 parameters."""
    model_dir = Path(model_dir)
    meta_path = model_dir / "model.meta"
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing model metadata {meta_path}")
    meta = {}
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    level_channels = tuple(int(v) for v in meta["level_channels"].split(","))
    categories = tuple(meta["categories"].split(","))
    model = DecoderModel(
        level_channels=level_channels,
        in_channels=int(meta["in_channels"]),
        d_g=int(meta["d_g"]),
        d_entries=int(meta["d_entries"]),
        lambdas=(float(meta["lambda1"]), float(meta["lambda2"]), float(meta["lambda3"])),
        params={},
        categories=categories,
        trained=meta.get("trained") == "1",
    )
    blocks = {}
    for k in RECON_LEVELS:
        blocks[k] = {
            name: tensorio.read_tensor(model_dir / f"block{k}_{name}.npft")
            for name in ("w1", "b1", "w2", "b2")
        }
    model.params = {
        "blocks": blocks,
        "pixel_w": tensorio.read_tensor(model_dir / "pixel_w.npft"),
        "pixel_b": tensorio.read_tensor(model_dir / "pixel_b.npft"),
        "g": {
            cat: tensorio.read_tensor(model_dir / f"g_{i}.npft")
            for i, cat in enumerate(categories)
        },
        "adapter": (
            tensorio.read_tensor(model_dir / "adapter.npft")
            if (model_dir / "adapter.npft").is_file()
            else None
        ),
    }
    codebooks, projectors = cb.load_codebooks(model_dir, RECON_LEVELS)
    return model, codebooks, projectors
