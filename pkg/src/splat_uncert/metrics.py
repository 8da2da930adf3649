"""Uncertainty-quality metrics: sparsification curves, AUSE and Pearson correlation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

N_BINS = 100


@dataclass(frozen=True)
class SparsificationCurve:
    fractions: np.ndarray
    values: np.ndarray

    def to_rows(self) -> list[dict]:
        return [{"fraction": float(f), "value": float(v)} for f, v in zip(self.fractions, self.values)]


def _flat_pair(error, ranking) -> tuple[np.ndarray, np.ndarray]:
    e = np.asarray(error, dtype=np.float64)
    r = np.asarray(ranking, dtype=np.float64)
    if e.shape != r.shape:
        raise ValueError(f"map dimensions differ: {e.shape} vs {r.shape}")
    e, r = e.reshape(-1), r.reshape(-1)
    if e.size == 0:
        raise ValueError("empty maps")
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(r))):
        raise ValueError("maps must be finite")
    return e, r


def sparsification_curve(error, ranking, n_bins: int = N_BINS) -> SparsificationCurve:
    """Normalized mean error left after removing the highest-ranked pixels.

    For bin ``i`` the ``floor(i * N / n_bins)`` pixels ranked highest are
    removed.  Pixels are ordered by ranking, descending, and ties fall back to
    ascending pixel index, so the removed pixels with equal ranks are the ones
    with the largest indices and the retained prefix keeps index order.
    """
    e, r = _flat_pair(error, ranking)
    total = e.mean()
    if total <= 0.0:
        raise ValueError("error map has zero mean; the curve normalization is undefined")
    n = e.size
    # Stable ascending sort: the retained set is always a prefix of this order.
    order = np.argsort(r, kind="stable")
    csum = np.concatenate([[0.0], np.cumsum(e[order])])
    fractions = np.arange(n_bins) / n_bins
    keep = n - (np.arange(n_bins) * n) // n_bins
    values = (csum[keep] / keep) / total
    return SparsificationCurve(fractions, values)


def ause(error, uncertainty, n_bins: int = N_BINS) -> float:
    """Mean gap between the uncertainty-ordered and the oracle curve."""
    by_u = sparsification_curve(error, uncertainty, n_bins)
    oracle = sparsification_curve(error, error, n_bins)
    return float(np.mean(by_u.values - oracle.values))


@dataclass(frozen=True)
class PearsonResult:
    value: float
    degenerate: bool

    def __float__(self) -> float:
        return self.value


def pearson(error, uncertainty) -> PearsonResult:
    """Sample Pearson coefficient; zero variance gives 0 flagged degenerate."""
    a, b = _flat_pair(error, uncertainty)
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        return PearsonResult(0.0, True)
    r = float(da @ db) / np.sqrt(saa * sbb)
    return PearsonResult(float(np.clip(r, -1.0, 1.0)), False)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class ViewMetrics:
    view: str
    ause: float
    pearson: float
    degenerate: bool = False


def evaluate_views(pairs: Sequence[tuple[str, np.ndarray, np.ndarray]]) -> list[ViewMetrics]:
    """Per-view AUSE and Pearson for ``(name, error, uncertainty)`` triples."""
    out = []
    for name, e, u in pairs:
        p = pearson(e, u)
        out.append(ViewMetrics(name, ause(e, u), p.value, p.degenerate))
    return out


def summarize(rows: Sequence[ViewMetrics]) -> dict:
    if not rows:
        raise ValueError("no views to summarize")
    return {
        "views": len(rows),
        "ause": float(np.mean([r.ause for r in rows])),
        "pearson": float(np.mean([r.pearson for r in rows])),
        "degenerate_views": int(sum(r.degenerate for r in rows)),
    }


def write_metrics_csv(path, rows: Sequence[ViewMetrics]) -> None:
    summary = summarize(rows)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["view", "ause", "pearson", "degenerate"])
        for r in rows:
            writer.writerow([r.view, f"{r.ause:.10g}", f"{r.pearson:.10g}", int(r.degenerate)])
        writer.writerow(["mean", f"{summary['ause']:.10g}", f"{summary['pearson']:.10g}", summary["degenerate_views"]])


def write_metrics_json(path, rows: Sequence[ViewMetrics]) -> None:
    Path(path).write_text(json.dumps(summarize(rows), indent=2) + "\n", encoding="utf-8")


def write_curve_csv(path, curves: dict[str, SparsificationCurve]) -> None:
    names = list(curves)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", *names])
        first = curves[names[0]]
        for i, f in enumerate(first.fractions):
            writer.writerow([f"{f:.2f}", *(f"{curves[n].values[i]:.10g}" for n in names)])
