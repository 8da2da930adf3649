"""End-to-end pipelines on synthetic scenes, shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .avs import AvsConfig, AvsTrace, run_avs
from .fitter import FitConfig, fit_base
from .guidance import attenuate, best_threshold, change_score
from .metrics import ause, pearson
from .photometric import DEFAULT_LAMBDA, dssim_map, residual_values
from .raster import RenderOptions, render
from .scene import Camera, Scene
from .solver import UncertFitConfig, fit_uncertainty_direct, fit_uncertainty_sgd
from .synthetic import (
    ChangeRegion,
    SyntheticSpec,
    apply_changes,
    degrade_scene,
    generate_scene,
    holdout_split,
    make_sparse_split,
)

log = logging.getLogger(__name__)

LAMBDA_SWEEP = (0.0,) + tuple(round(0.02 * 2**i, 2) for i in range(11))


@dataclass
class Prepared:
    """A ground-truth scene, its views and a base scene fitted on the training subset."""

    spec: SyntheticSpec
    truth: Scene
    cameras: list[Camera]
    images: list[np.ndarray]
    train: list[int]
    test: list[int]
    fitted: Scene

    def views(self, ids: Sequence[int]) -> list[tuple[Camera, np.ndarray]]:
        return [(self.cameras[i], self.images[i]) for i in ids]


def prepare(
    spec: SyntheticSpec,
    split: str = "holdout",
    base_iterations: int | None = None,
    base_iter_per_view: int = 20,
    fit_cfg: FitConfig | None = None,
) -> Prepared:
    """Generate, split and fit.  ``split`` is ``"holdout"`` or ``"sparse"``."""
    truth, cams, imgs = generate_scene(spec)
    if split == "holdout":
        train, test = holdout_split(len(cams), spec.holdout_every)
    elif split == "sparse":
        train, test = make_sparse_split(cams, 4, spec.holdout_every)
    else:
        raise ValueError(f"unknown split {split!r}")
    init = degrade_scene(truth, spec)
    iters = base_iter_per_view * len(train) if base_iterations is None else base_iterations
    cfg = replace(fit_cfg or FitConfig(), iterations=iters, seed=spec.seed)
    fitted = fit_base(init, [(cams[i], imgs[i]) for i in train], cfg)
    return Prepared(spec, truth, cams, imgs, train, test, fitted)


def residual_views(scene: Scene, views, lam: float = DEFAULT_LAMBDA) -> list[tuple[Camera, np.ndarray]]:
    return [(cam, residual_values(render(scene, cam).color, gt, lam)) for cam, gt in views]


def fit_uncertainty(
    scene: Scene, residuals, cfg: UncertFitConfig, solver: str = "sgd"
) -> Scene:
    zero = scene.with_uncertainty(np.zeros_like(scene.uncert_coeffs))
    if solver == "sgd":
        return fit_uncertainty_sgd(zero, residuals, cfg)
    if solver == "direct":
        return fit_uncertainty_direct(zero, residuals, cfg)
    raise ValueError(f"unknown solver {solver!r}")


def uncertainty_maps(scene: Scene, cams: Sequence[Camera], background_uncertainty: float) -> list[np.ndarray]:
    opts = RenderOptions(background_uncertainty=background_uncertainty)
    return [render(scene, c, opts).uncertainty for c in cams]


# --------------------------------------------------------------------------
# Predictive power on held-out views
# --------------------------------------------------------------------------


@dataclass
class PredictiveResult:
    pearson: float
    shuffled_p95: float
    shuffled: np.ndarray
    ause: float


def predictive_power(prep: Prepared, cfg: UncertFitConfig, n_shuffles: int = 100, seed: int = 0) -> PredictiveResult:
    """Pooled Pearson of rendered uncertainty against holdout DSSIM, with a shuffle baseline."""
    res = residual_views(prep.fitted, prep.views(prep.train))
    fitted = fit_uncertainty(prep.fitted, res, cfg)
    cams = [prep.cameras[i] for i in prep.test]
    umaps = uncertainty_maps(fitted, cams, cfg.background_uncertainty)
    errs = [dssim_map(render(prep.fitted, c).color, prep.images[i]) for c, i in zip(cams, prep.test)]
    e = np.concatenate([x.reshape(-1) for x in errs])
    u = np.concatenate([x.reshape(-1) for x in umaps])
    r = pearson(e, u).value
    rng = np.random.default_rng(seed)
    shuffled = np.array([pearson(e, rng.permutation(u)).value for _ in range(n_shuffles)])
    a = float(np.mean([ause(x, y) for x, y in zip(errs, umaps)]))
    return PredictiveResult(r, float(np.percentile(shuffled, 95)), shuffled, a)


# --------------------------------------------------------------------------
# Regularization sweep on the sparse split
# --------------------------------------------------------------------------


@dataclass
class SweepRow:
    lambda_reg: float
    ause_dssim: float
    ause_l1: float
    pearson_dssim: float


def regularization_sweep(
    prep: Prepared,
    lambdas: Sequence[float] = LAMBDA_SWEEP,
    prior_level: float = 1.0,
    solver: str = "direct",
    iterations: int = 400,
    background_prior: bool | None = None,
) -> list[SweepRow]:
    res = residual_views(prep.fitted, prep.views(prep.train))
    cams = [prep.cameras[i] for i in prep.test]
    renders = [render(prep.fitted, c).color for c in cams]
    gts = [prep.images[i] for i in prep.test]
    e_dssim = [dssim_map(r, g) for r, g in zip(renders, gts)]
    e_l1 = [np.abs(r - g).mean(axis=2) for r, g in zip(renders, gts)]
    rows = []
    for lam in lambdas:
        cfg = UncertFitConfig(
            iterations=iterations, lambda_reg=lam, prior_level=prior_level, background_prior=background_prior
        )
        fitted = fit_uncertainty(prep.fitted, res, cfg, solver)
        umaps = uncertainty_maps(fitted, cams, cfg.background_uncertainty)
        rows.append(
            SweepRow(
                float(lam),
                float(np.mean([ause(e, u) for e, u in zip(e_dssim, umaps)])),
                float(np.mean([ause(e, u) for e, u in zip(e_l1, umaps)])),
                float(np.mean([pearson(e, u).value for e, u in zip(e_dssim, umaps)])),
            )
        )
        log.info("lambda_reg %.2f ause(dssim) %.4f", lam, rows[-1].ause_dssim)
    return rows


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda_reg", "ause_dssim", "ause_l1", "pearson_dssim"])
        for r in rows:
            writer.writerow([f"{r.lambda_reg:g}", f"{r.ause_dssim:.10g}", f"{r.ause_l1:.10g}", f"{r.pearson_dssim:.10g}"])


# --------------------------------------------------------------------------
# Change detection analog
# --------------------------------------------------------------------------


@dataclass
class ChangeResult:
    raw_f1: float
    raw_threshold: float
    attenuated_f1: float
    attenuated_threshold: float
    raw_maps: list[np.ndarray] = field(repr=False, default_factory=list)
    attenuated_maps: list[np.ndarray] = field(repr=False, default_factory=list)
    uncertainty: list[np.ndarray] = field(repr=False, default_factory=list)
    masks: list[np.ndarray] = field(repr=False, default_factory=list)


DEFAULT_CHANGES = (
    ChangeRegion((0.35, -0.2, 0.0), 0.3, "insert", (0.95, 0.95, 0.1)),
    ChangeRegion((-0.4, 0.3, 0.2), 0.3, "insert", (0.1, 0.9, 0.95)),
)


def change_experiment(
    prep: Prepared,
    changes: Sequence[ChangeRegion] = DEFAULT_CHANGES,
    cfg: UncertFitConfig | None = None,
    mask_threshold: float = 0.05,
) -> ChangeResult:
    """Score query views of a changed scene against the fitted scene, with and without attenuation.

    The ground-truth mask marks pixels where the true change alters the image;
    every other detection is a false positive caused by reconstruction error.
    """
    cfg = cfg or UncertFitConfig(iterations=400, lambda_reg=0.0)
    changed = apply_changes(prep.truth, changes, seed=prep.spec.seed)
    res = residual_views(prep.fitted, prep.views(prep.train))
    fitted = fit_uncertainty(prep.fitted, res, cfg)
    cams = [prep.cameras[i] for i in prep.test]
    umaps = uncertainty_maps(fitted, cams, cfg.background_uncertainty)
    raw_maps, att_maps, masks = [], [], []
    for cam, u, i in zip(cams, umaps, prep.test):
        query = render(changed, cam).color
        masks.append((np.abs(query - prep.images[i]).mean(axis=2) > mask_threshold).astype(np.uint8))
        m = change_score(render(prep.fitted, cam).color, query)
        raw_maps.append(m)
        att_maps.append(attenuate(m, u))
    raw = best_threshold(raw_maps, masks)
    att = best_threshold(att_maps, masks)
    return ChangeResult(raw.f1, raw.threshold, att.f1, att.threshold, raw_maps, att_maps, umaps, masks)


# --------------------------------------------------------------------------
# Active view selection
# --------------------------------------------------------------------------


def avs_experiment(
    spec: SyntheticSpec, cfg: AvsConfig, policy: str, holdout_every: int = 4
) -> AvsTrace:
    """Pool/holdout split of the orbit, then :func:`run_avs` from the degraded scene."""
    truth, cams, imgs = generate_scene(spec)
    pool_ids, hold_ids = holdout_split(len(cams), holdout_every)
    pool = [(cams[i], imgs[i]) for i in pool_ids]
    holdout = [(cams[i], imgs[i]) for i in hold_ids]
    return run_avs(pool, holdout, cfg, policy, degrade_scene(truth, spec))
