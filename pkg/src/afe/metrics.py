"""Evaluation: image/pixel AUROC and the saturated per-region-overlap curve.

AUROC is the rank statistic (ties count half). sPRO sweeps thresholds
over the exact distinct map values, tracking per-region overlap capped
at a saturation value (default: the full region area, which makes the
curve the classical PRO curve) against the false-positive rate over all
normal pixels. Curves are integrated as polylines (trapezoid rule).
"""
from __future__ import annotations

import dataclasses

import numpy as np
from scipy import ndimage

SPRO_LIMITS = (0.01, 0.05, 0.1, 0.3, 1.0)
EIGHT_CONNECTED = np.ones((3, 3), dtype=np.int32)


@dataclasses.dataclass(frozen=True)
class SProCurve:
    fpr: np.ndarray  # non-decreasing, 0..1
    spro: np.ndarray  # mean saturated overlap at each fpr
    saturation_policy: str = "region-area"


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank span."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; ties contribute 1/2."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pixel_auroc(maps, masks) -> float:
    """AUROC over the concatenated pixels of all maps."""
    if len(maps) != len(masks):
        raise ValueError(f"{len(maps)} maps vs {len(masks)} masks")
    scores, labels = [], []
    for m, g in zip(maps, masks):
        m = np.asarray(m)
        g = np.asarray(g)
        if m.shape != g.shape:
            raise ValueError(f"map shape {m.shape} != mask shape {g.shape}")
        scores.append(m.reshape(-1))
        labels.append((g > 0).astype(np.int64).reshape(-1))
    return auroc(np.concatenate(scores), np.concatenate(labels))


def label_regions(mask: np.ndarray):
    """8-connected components of a binary mask; returns (labels, count)."""
    return ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)


def spro_curve(maps, masks, saturation: dict = None) -> SProCurve:
    """Threshold sweep over all distinct values, descending.

    saturation: optional {(image_index, region_label): pixels}; regions
    without an entry saturate at their full area.
    """
    if len(maps) != len(masks):
        raise ValueError(f"{len(maps)} maps vs {len(masks)} masks")
    all_scores, all_region = [], []
    region_sat = []
    region_count = 0
    for i, (m, g) in enumerate(zip(maps, masks)):
        m = np.asarray(m, dtype=np.float64)
        g = np.asarray(g)
        if m.shape != g.shape:
            raise ValueError(f"map shape {m.shape} != mask shape {g.shape}")
        labels, n = label_regions(g)
        region_ids = np.full(m.shape, -1, dtype=np.int64)
        for r in range(1, n + 1):
            area = int(np.sum(labels == r))
            sat = float(saturation.get((i, r), area)) if saturation else float(area)
            if not 0 < sat <= area:
                raise ValueError(
                    f"saturation for image {i} region {r} must be in (0, {area}], got {sat}"
                )
            region_ids[labels == r] = region_count
            region_sat.append(sat)
            region_count += 1
        all_scores.append(m.reshape(-1))
        all_region.append(region_ids.reshape(-1))
    if region_count == 0:
        raise ValueError("ground truth contains no anomalous regions")
    scores = np.concatenate(all_scores)
    regions = np.concatenate(all_region)
    sat = np.asarray(region_sat, dtype=np.float64)
    total_normal = int(np.sum(regions == -1))
    if total_normal == 0:
        raise ValueError("ground truth contains no normal pixels")

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    r_sorted = regions[order]
    overlap = np.zeros(region_count, dtype=np.float64)
    fp = 0
    fprs, spros = [0.0], [0.0]
    i = 0
    n = len(s_sorted)
    while i < n:
        j = i
        while j + 1 < n and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        chunk = r_sorted[i : j + 1]
        fp += int(np.sum(chunk == -1))
        hit = chunk[chunk >= 0]
        if hit.size:
            np.add.at(overlap, hit, 1.0)
        fprs.append(fp / total_normal)
        spros.append(float(np.mean(np.minimum(overlap / sat, 1.0))))
        i = j + 1
    return SProCurve(np.asarray(fprs), np.asarray(spros))


def spro_auc(curve: SProCurve, limit: float) -> float:
    """Trapezoidal area under the polyline on [0, limit], normalized by limit."""
    if not 0 < limit <= 1:
        raise ValueError(f"fpr limit must be in (0, 1], got {limit}")
    x = np.asarray(curve.fpr, dtype=np.float64)
    y = np.asarray(curve.spro, dtype=np.float64)
    if x.size < 2:
        raise ValueError("curve needs at least two points")
    keep = x <= limit
    xs = x[keep]
    ys = y[keep]
    if xs[-1] < limit:
        ys = np.append(ys, np.interp(limit, x, y))
        xs = np.append(xs, limit)
    area = float(np.trapezoid(ys, xs))
    return area / limit


def evaluate(image_scores, image_labels, maps, masks, limits=SPRO_LIMITS) -> dict:
    """The full fixed-key metrics dict for the report."""
    full_masks = [g if g is not None else np.zeros(np.asarray(m).shape, dtype=np.uint8)
                  for m, g in zip(maps, masks)]
    out = {
        "image_auroc": auroc(image_scores, image_labels),
        "pixel_auroc": pixel_auroc(maps, full_masks),
    }
    curve = spro_curve(maps, full_masks)
    for lim in limits:
        out[f"spro@{format_limit(lim)}"] = spro_auc(curve, lim)
    return out


def format_limit(lim: float) -> str:
    return f"{lim:.1f}" if lim == int(lim) else f"{lim:g}"


def report_text(metrics: dict) -> str:
    """Fixed-key UTF-8 report, 4 fractional digits per value."""
    keys = ["image_auroc", "pixel_auroc"] + [f"spro@{format_limit(l)}" for l in SPRO_LIMITS]
    lines = []
    for key in keys:
        if key in metrics:
            lines.append(f"{key} = {metrics[key]:.4f}")
    return "\n".join(lines) + "\n"
