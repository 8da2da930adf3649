"""Uncertainty-guided attenuation of change/anomaly score maps and mask scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageio import write_ppm
from .photometric import DEFAULT_LAMBDA, residual_values

THRESHOLDS = np.round(np.arange(1, 20) * 0.05, 2)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"map dimensions differ: {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class GuidedMap:
    raw: np.ndarray
    uncertainty: np.ndarray
    attenuated: np.ndarray


def attenuate(raw, uncert) -> np.ndarray:
    """``raw * (1 - clip(uncert, 0, 1))`` elementwise."""
    raw = np.asarray(raw, dtype=np.float64)
    u = np.asarray(uncert, dtype=np.float64)
    _same_shape(raw, u)
    return raw * (1.0 - np.clip(u, 0.0, 1.0))


def guide(raw, uncert) -> GuidedMap:
    u = np.clip(np.asarray(uncert, dtype=np.float64), 0.0, 1.0)
    return GuidedMap(np.asarray(raw, dtype=np.float64), u, attenuate(raw, u))


def binarize(values, threshold: float) -> np.ndarray:
    """Strict comparison: values equal to the threshold map to 0."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(values) > threshold).astype(np.uint8)


@dataclass(frozen=True)
class MaskScore:
    iou: float
    f1: float
    empty: bool = False

    def __iter__(self):
        return iter((self.iou, self.f1))


def mask_metrics(pred, gt) -> MaskScore:
    """IoU and F1 of binary masks; two empty masks score 1.0 with ``empty`` set."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    _same_shape(p, g)
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    if tp + fp + fn == 0:
        return MaskScore(1.0, 1.0, True)
    return MaskScore(tp / (tp + fp + fn), 2 * tp / (2 * tp + fp + fn))


@dataclass(frozen=True)
class SweepResult:
    threshold: float
    iou: float
    f1: float
    table: list[tuple[float, float, float]]


def _as_list(x) -> list[np.ndarray]:
    return [np.asarray(m) for m in x] if isinstance(x, (list, tuple)) else [np.asarray(x)]


def best_threshold(score_maps, gt_masks, thresholds=THRESHOLDS) -> SweepResult:
    """Threshold with the highest F1 pooled over all maps (first on ties)."""
    maps, masks = _as_list(score_maps), _as_list(gt_masks)
    if len(maps) != len(masks):
        raise ValueError("need one ground-truth mask per score map")
    table = []
    for t in thresholds:
        pred = np.concatenate([binarize(m, float(t)).reshape(-1) for m in maps])
        truth = np.concatenate([g.reshape(-1) for g in masks])
        s = mask_metrics(pred, truth)
        table.append((float(t), s.iou, s.f1))
    best = max(range(len(table)), key=lambda i: (table[i][2], -i))
    t, iou, f1 = table[best]
    return SweepResult(t, iou, f1, table)


def change_score(render, query, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Pixel-difference change map between a scene render and a query image."""
    return np.clip(residual_values(render, query, lam), 0.0, 1.0)


def write_mask_ppm(path, mask) -> None:
    m = np.asarray(mask, dtype=np.float64)
    write_ppm(path, np.repeat(m[:, :, None], 3, axis=2))
