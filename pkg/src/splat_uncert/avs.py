"""Active view selection: farthest-point initialization and the fit/select loop."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .fitter import FitConfig, fit_base
from .photometric import DEFAULT_LAMBDA, mean_ssim, psnr, residual_values
from .raster import RenderOptions, render, worker_count
from .scene import Camera, Scene
from .solver import UncertFitConfig, fit_uncertainty_sgd

log = logging.getLogger(__name__)

POLICIES = ("uncertainty", "random", "farthest")


class PoolExhausted(ValueError):
    pass


@dataclass
class AvsConfig:
    initial_views: int = 4
    selections: int = 16
    base_iter_per_view: int = 100
    uncert_iter_per_view: int = 50
    seed: int = 0
    lambda_reg: float = 0.32
    prior_level: float = 1.0
    background_prior: bool | None = None
    uncert_learning_rate: float = 0.01
    warm_start: bool = True
    clamp_scores: bool = False
    base: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.initial_views < 2:
            raise ValueError("initial_views must be >= 2")
        if self.selections < 0:
            raise ValueError("selections must be >= 0")
        if self.base_iter_per_view < 0 or self.uncert_iter_per_view < 0:
            raise ValueError("iteration budgets must be >= 0")

    def uncert_config(self, n_views: int) -> UncertFitConfig:
        return UncertFitConfig(
            iterations=self.uncert_iter_per_view * n_views,
            learning_rate=self.uncert_learning_rate,
            lambda_reg=self.lambda_reg,
            prior_level=self.prior_level,
            background_prior=self.background_prior,
            seed=self.seed,
        )


@dataclass
class AvsRound:
    round: int
    selected_id: int | None
    total_uncertainty: float
    psnr: float
    ssim: float


@dataclass
class AvsTrace:
    policy: str
    initial: list[int]
    rounds: list[AvsRound] = field(default_factory=list)
    base_iterations: list[int] = field(default_factory=list)
    uncert_iterations: list[int] = field(default_factory=list)
    scene: Scene | None = None

    @property
    def selected(self) -> list[int]:
        return [r.selected_id for r in self.rounds if r.selected_id is not None]

    @property
    def training_ids(self) -> list[int]:
        return self.initial + self.selected

    @property
    def final_psnr(self) -> float:
        return self.rounds[-1].psnr

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "selected_id", "total_uncertainty", "psnr", "ssim"])
            for r in self.rounds:
                sel = "" if r.selected_id is None else r.selected_id
                tu = "" if math.isnan(r.total_uncertainty) else f"{r.total_uncertainty:.10g}"
                writer.writerow([r.round, sel, tu, f"{r.psnr:.10g}", f"{r.ssim:.10g}"])


def _centers(cameras: Sequence[Camera]) -> np.ndarray:
    return np.array([c.center for c in cameras], dtype=np.float64).reshape(-1, 3)


def farthest_point_init(cameras: Sequence[Camera] | np.ndarray, k: int) -> list[int]:
    """Greedy max-min selection seeded with the farthest pair of camera centers.

    ``cameras`` may also be an ``(N, 3)`` array of centers.  Ties go to the
    lowest index.
    """
    pts = np.asarray(cameras, dtype=np.float64) if isinstance(cameras, np.ndarray) else _centers(cameras)
    n = len(pts)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"cannot pick {k} views from a pool of {n}")
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    # argmax over the flattened upper triangle returns the lexicographically
    # first maximal pair.
    iu = np.triu_indices(n, 1)
    best = int(np.argmax(dist[iu]))
    chosen = [int(iu[0][best]), int(iu[1][best])]
    mind = np.minimum(dist[chosen[0]], dist[chosen[1]])
    while len(chosen) < k:
        cand = mind.copy()
        cand[chosen] = -np.inf
        nxt = int(np.argmax(cand))
        chosen.append(nxt)
        mind = np.minimum(mind, dist[nxt])
    return chosen


def candidate_scores(
    scene: Scene,
    candidates: Sequence[Camera],
    background_uncertainty: float = 0.0,
    clamp: bool = False,
    workers: int | None = None,
) -> np.ndarray:
    """Per-candidate sum of the rendered uncertainty map."""
    opts = RenderOptions(background_uncertainty=background_uncertainty, workers=1)

    def score(cam):
        out = render(scene, cam, opts)
        return float((out.uncertainty if clamp else out.uncertainty_raw).sum())

    n = worker_count(workers)
    if n > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=n) as ex:
            return np.array(list(ex.map(score, candidates)))
    return np.array([score(c) for c in candidates])


def select_next_view(
    scene: Scene,
    candidates: Sequence[Camera],
    background_uncertainty: float = 0.0,
    clamp: bool = False,
) -> int:
    """Index of the candidate with the largest total uncertainty (lowest on ties)."""
    if len(candidates) == 0:
        raise ValueError("no candidate views")
    return int(np.argmax(candidate_scores(scene, candidates, background_uncertainty, clamp)))


def _holdout_quality(scene: Scene, holdout) -> tuple[float, float]:
    if not holdout:
        return float("nan"), float("nan")
    ps, ss = [], []
    for cam, gt in holdout:
        img = render(scene, cam).color
        ps.append(psnr(img, gt))
        ss.append(mean_ssim(img, gt))
    return float(np.mean(ps)), float(np.mean(ss))


def _residual_views(scene: Scene, views, lam: float = DEFAULT_LAMBDA):
    return [(cam, residual_values(render(scene, cam).color, gt, lam)) for cam, gt in views]


def run_avs(
    pool: Sequence[tuple[Camera, np.ndarray]],
    holdout: Sequence[tuple[Camera, np.ndarray]],
    cfg: AvsConfig,
    policy: str,
    init_scene: Scene,
    progress: Callable[[AvsRound], None] | None = None,
) -> AvsTrace:
    """Interleave base fitting and view acquisition from a discrete pool.

    The base scene is refit for ``base_iter_per_view * N`` iterations after
    each acquisition, continuing from the previous state.  For the uncertainty
    policy the uncertainty channel is fit for ``uncert_iter_per_view * N``
    iterations before every selection.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    pool_cams = [c for c, _ in pool]
    if cfg.initial_views + cfg.selections > len(pool):
        raise PoolExhausted(
            f"pool of {len(pool)} views cannot supply {cfg.initial_views} initial "
            f"plus {cfg.selections} selected views"
        )
    rng = np.random.default_rng(cfg.seed)
    train = farthest_point_init(pool_cams, cfg.initial_views)
    trace = AvsTrace(policy, list(train))

    def base_fit(scene, ids, round_index):
        iters = cfg.base_iter_per_view * len(ids)
        fc = FitConfig(**{**cfg.base.__dict__, "iterations": iters, "seed": cfg.seed * 1000 + round_index})
        trace.base_iterations.append(iters)
        return fit_base(scene, [pool[i] for i in ids], fc)

    scene = base_fit(init_scene, train, 0)
    p, s = _holdout_quality(scene, holdout)
    trace.rounds.append(AvsRound(0, None, float("nan"), p, s))
    if progress:
        progress(trace.rounds[-1])
    coeffs = None
    for rnd in range(1, cfg.selections + 1):
        remaining = [i for i in range(len(pool)) if i not in train]
        total_u = float("nan")
        if policy == "uncertainty":
            ucfg = cfg.uncert_config(len(train))
            if cfg.warm_start and coeffs is not None:
                start = scene.with_uncertainty(coeffs)
            else:
                start = scene.with_uncertainty(np.zeros_like(scene.uncert_coeffs))
            fitted = fit_uncertainty_sgd(start, _residual_views(scene, [pool[i] for i in train]), ucfg)
            trace.uncert_iterations.append(ucfg.iterations)
            coeffs = fitted.uncert_coeffs
            scores = candidate_scores(
                fitted, [pool_cams[i] for i in remaining], ucfg.background_uncertainty, cfg.clamp_scores
            )
            pick = int(np.argmax(scores))
            total_u = float(scores[pick])
            chosen = remaining[pick]
        elif policy == "random":
            chosen = int(remaining[int(rng.integers(len(remaining)))])
        else:
            chosen = farthest_extension(pool_cams, train, remaining)
        train.append(chosen)
        scene = base_fit(scene, train, rnd)
        p, s = _holdout_quality(scene, holdout)
        trace.rounds.append(AvsRound(rnd, chosen, total_u, p, s))
        log.info("round %d policy %s picked %d psnr %.3f", rnd, policy, chosen, p)
        if progress:
            progress(trace.rounds[-1])
    trace.scene = scene if coeffs is None else scene.with_uncertainty(coeffs)
    return trace


def farthest_extension(cameras: Sequence[Camera], chosen: Sequence[int], remaining: Sequence[int]) -> int:
    """Remaining index with the largest distance to its nearest chosen camera."""
    pts = _centers(cameras)
    d = np.linalg.norm(pts[list(remaining)][:, None] - pts[list(chosen)][None], axis=-1).min(axis=1)
    return int(remaining[int(np.argmax(d))])
