"""Z-score calibration and fusion of the two branch maps.

Each branch's raw anomaly maps live on its own scale, so both are
normalized by the mean and population standard deviation of all
validation pixels before the weighted sum. The fused map is smoothed
with a sigma-4 Gaussian; the image score is the maximum pixel.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import ops

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 3.0  # the logical branch is weighted 3x on count/arrangement data
SMOOTH_SIGMA = 4.0
SIGMA_FLOOR = 1e-8


@dataclasses.dataclass(frozen=True)
class CalibrationStats:
    mu_str: float
    sigma_str: float
    mu_log: float
    sigma_log: float
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA


def _population_stats(maps) -> tuple:
    pixels = np.concatenate([np.asarray(m, dtype=np.float64).reshape(-1) for m in maps])
    mu = float(pixels.mean())
    sigma = float(np.sqrt(np.mean((pixels - mu) ** 2)))
    return mu, max(sigma, SIGMA_FLOOR)


def calibrate(val_str_maps, val_log_maps, alpha: float = DEFAULT_ALPHA,
              beta: float = DEFAULT_BETA) -> CalibrationStats:
    """Mean/std over every pixel of every validation map, per branch."""
    if not val_str_maps or not val_log_maps:
        raise ValueError("calibration needs at least one validation map per branch")
    mu_s, sd_s = _population_stats(val_str_maps)
    mu_l, sd_l = _population_stats(val_log_maps)
    return CalibrationStats(mu_s, sd_s, mu_l, sd_l, float(alpha), float(beta))


def fuse(a_str: np.ndarray, a_log: np.ndarray, stats: CalibrationStats,
         smooth_sigma: float = SMOOTH_SIGMA) -> np.ndarray:
    """alpha * z(A_str) + beta * z(A_log), then Gaussian smoothing."""
    a_str = np.asarray(a_str, dtype=np.float64)
    a_log = np.asarray(a_log, dtype=np.float64)
    if a_str.shape != a_log.shape:
        raise ValueError(f"branch maps differ in shape: {a_str.shape} vs {a_log.shape}")
    z = stats.alpha * (a_str - stats.mu_str) / stats.sigma_str
    z += stats.beta * (a_log - stats.mu_log) / stats.sigma_log
    return ops.gaussian_smooth(z, smooth_sigma)


def image_score(a_map: np.ndarray) -> float:
    """Largest pixel anomaly score."""
    a_map = np.asarray(a_map)
    if a_map.size == 0:
        raise ValueError("cannot score an empty map")
    return float(a_map.max())


def save_stats(path, stats: CalibrationStats) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = {
        "mu_str": stats.mu_str,
        "sigma_str": stats.sigma_str,
        "mu_log": stats.mu_log,
        "sigma_log": stats.sigma_log,
        "alpha": stats.alpha,
        "beta": stats.beta,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(f"{k} = {v!r}\n" for k, v in fields.items()), encoding="utf-8")
    tmp.replace(path)


def load_stats(path) -> CalibrationStats:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing calibration file {path}")
    values = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            values[key.strip()] = float(value.strip())
    return CalibrationStats(**values)
