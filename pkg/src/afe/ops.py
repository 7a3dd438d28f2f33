"""Resampling and smoothing kernels shared across the pipeline.

All kernels accumulate in float64 and round to float32 on the way out,
so results are reproducible across platforms. Interpolation is
corner-aligned; borders reflect without repeating the edge sample.
"""
from __future__ import annotations

import numpy as np

from .tensorio import require_finite


def interp_matrix(src_n: int, dst_n: int) -> np.ndarray:
    """Dense (dst_n, src_n) corner-aligned linear interpolation matrix.

    Row i holds the source weights for output sample i. Works for both
    enlargement and reduction; identity when dst_n == src_n.
    """
    if src_n < 1 or dst_n < 1:
        raise ValueError(f"interp_matrix needs positive sizes, got {src_n}->{dst_n}")
    w = np.zeros((dst_n, src_n), dtype=np.float64)
    if src_n == 1:
        w[:, 0] = 1.0
        return w
    scale = (src_n - 1) / (dst_n - 1) if dst_n > 1 else 0.0
    for i in range(dst_n):
        x = i * scale
        i0 = min(int(np.floor(x)), src_n - 1)
        i1 = min(i0 + 1, src_n - 1)
        frac = x - i0
        w[i, i0] += 1.0 - frac
        w[i, i1] += frac
    return w


def resample_f64(src: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling without the float32 rounding step."""
    squeeze = src.ndim == 2
    if squeeze:
        src = src[None]
    if src.ndim != 3:
        raise ValueError(f"expected a 2-D map or C,H,W tensor, got shape {src.shape}")
    wr = interp_matrix(src.shape[1], target_h)
    wc = interp_matrix(src.shape[2], target_w)
    out = np.einsum("hs,csw,wt->cht", wr, src.astype(np.float64), wc.T, optimize=True)
    return out[0] if squeeze else out


def _resample(src: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    return resample_f64(src, target_h, target_w).astype(np.float32)


def bilinear_upsample(src: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Corner-aligned bilinear enlargement of a (C, h, w) tensor or (h, w) map.

    Exact pass-through when the target equals the source size.
    """
    h, w = src.shape[-2], src.shape[-1]
    if target_h < h or target_w < w:
        raise ValueError(
            f"bilinear_upsample target {target_h}x{target_w} is smaller than source {h}x{w}"
        )
    return _resample(src, target_h, target_w)


def bilinear_resample(src: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling, enlargement or reduction."""
    return _resample(src, target_h, target_w)


def upsample_adjoint(grad_out: np.ndarray, src_h: int, src_w: int) -> np.ndarray:
    """Transpose of :func:`bilinear_upsample` for backpropagation.

    ``grad_out`` has shape (C, H, W); result has shape (C, src_h, src_w).
    """
    wr = interp_matrix(src_h, grad_out.shape[1])
    wc = interp_matrix(src_w, grad_out.shape[2])
    return np.einsum("hs,chw,wt->cst", wr, grad_out.astype(np.float64), wc, optimize=True)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ceil(4*sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(np.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    """Map out-of-range indices back inside [0, n) by edge-free reflection."""
    if n == 1:
        return np.zeros_like(np.asarray(i))
    period = 2 * (n - 1)
    m = np.mod(np.asarray(i), period)
    return np.where(m >= n, period - m, m)


def avg3_matrix(n: int, rate: int) -> np.ndarray:
    """Dense (n, n) operator: average over reflected offsets {-rate, 0, rate}."""
    if rate < 1:
        raise ValueError(f"rate must be >= 1, got {rate}")
    a = np.zeros((n, n), dtype=np.float64)
    rows = np.arange(n)
    for d in (-rate, 0, rate):
        np.add.at(a, (rows, reflect_index(rows + d, n)), 1.0 / 3.0)
    return a


def smoothing_matrix(n: int, kernel: np.ndarray) -> np.ndarray:
    """Dense (n, n) operator applying ``kernel`` with reflected borders."""
    radius = (len(kernel) - 1) // 2
    s = np.zeros((n, n), dtype=np.float64)
    rows = np.arange(n)
    for d in range(-radius, radius + 1):
        np.add.at(s, (rows, reflect_index(rows + d, n)), kernel[d + radius])
    return s


def _apply_separable(t: np.ndarray, op_h: np.ndarray, op_w: np.ndarray) -> np.ndarray:
    squeeze = t.ndim == 2
    if squeeze:
        t = t[None]
    if t.ndim != 3:
        raise ValueError(f"expected a 2-D map or C,H,W tensor, got shape {t.shape}")
    out = np.einsum("hs,csw,tw->cht", op_h, t.astype(np.float64), op_w, optimize=True)
    return out[0] if squeeze else out


def gaussian_smooth(score_map: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a 2-D score map, reflect-padded."""
    if score_map.ndim != 2:
        raise ValueError(f"gaussian_smooth expects a 2-D map, got shape {score_map.shape}")
    require_finite("score_map", score_map)
    kernel = gaussian_kernel(sigma)
    op_h = smoothing_matrix(score_map.shape[0], kernel)
    op_w = smoothing_matrix(score_map.shape[1], kernel)
    return _apply_separable(score_map, op_h, op_w).astype(np.float32)


def local_average_3x3(t: np.ndarray) -> np.ndarray:
    """3x3 box average of a (C, H, W) tensor with reflect padding."""
    if t.ndim != 3:
        raise ValueError(f"expected C,H,W tensor, got shape {t.shape}")
    op_h = avg3_matrix(t.shape[1], 1)
    op_w = avg3_matrix(t.shape[2], 1)
    return _apply_separable(t, op_h, op_w).astype(np.float32)


def dilated_average_3x3(t: np.ndarray, rate: int) -> np.ndarray:
    """Average over the 9 samples at offsets {-rate,0,rate}^2, reflect-padded."""
    if t.ndim != 3:
        raise ValueError(f"expected C,H,W tensor, got shape {t.shape}")
    op_h = avg3_matrix(t.shape[1], rate)
    op_w = avg3_matrix(t.shape[2], rate)
    return _apply_separable(t, op_h, op_w).astype(np.float32)


def dilated_average_3x3_adjoint(grad_out: np.ndarray, rate: int) -> np.ndarray:
    """Transpose of :func:`dilated_average_3x3` for backpropagation (float64)."""
    if grad_out.ndim != 3:
        raise ValueError(f"expected C,H,W tensor, got shape {grad_out.shape}")
    op_h = avg3_matrix(grad_out.shape[1], rate)
    op_w = avg3_matrix(grad_out.shape[2], rate)
    return _apply_separable(grad_out, op_h.T, op_w.T)
