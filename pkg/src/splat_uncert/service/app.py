"""FastAPI application exposing rendering, metrics, attenuation, fitting and selection."""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..avs import candidate_scores
from ..guidance import attenuate, binarize, mask_metrics
from ..metrics import ause, pearson
from ..raster import RenderOptions, render
from ..scene import Camera, Scene
from ..solver import UncertFitConfig, UncertaintyProblem, fit_uncertainty_direct, fit_uncertainty_sgd
from . import schemas


def _scene(m: schemas.SceneModel) -> Scene:
    return Scene.from_dict(m.model_dump())


def _camera(m: schemas.CameraModel) -> Camera:
    return Camera.from_dict(m.model_dump())


def _grid(values, name: str) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise HTTPException(status_code=422, detail=f"{name} must be a non-empty 2D grid")
    return a


def _invalid(exc: Exception) -> HTTPException:
    return HTTPException(status_code=422, detail=str(exc))


def create_app() -> FastAPI:
    app = FastAPI(title="splat-uncert", version=__version__)

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/render", response_model=schemas.RenderResponse)
    def render_view(req: schemas.RenderRequest):
        try:
            scene, cam = _scene(req.scene), _camera(req.camera)
        except ValueError as exc:
            raise _invalid(exc) from exc
        out = render(scene, cam, RenderOptions(background_uncertainty=req.background_uncertainty))
        return {
            "width": cam.width,
            "height": cam.height,
            "color": out.color.tolist(),
            "uncertainty": out.uncertainty.tolist(),
            "uncertainty_raw": out.uncertainty_raw.tolist(),
            "final_transmittance": out.final_transmittance.reshape(cam.shape).tolist(),
        }

    @app.post("/metrics", response_model=schemas.MetricsResponse)
    def metrics(req: schemas.MetricsRequest):
        e, u = _grid(req.error, "error"), _grid(req.uncertainty, "uncertainty")
        try:
            p = pearson(e, u)
            return {"ause": ause(e, u), "pearson": p.value, "degenerate": p.degenerate}
        except ValueError as exc:
            raise _invalid(exc) from exc

    @app.post("/attenuate", response_model=schemas.AttenuateResponse)
    def attenuate_map(req: schemas.AttenuateRequest):
        raw, u = _grid(req.raw, "raw"), _grid(req.uncertainty, "uncertainty")
        try:
            att = attenuate(raw, u)
        except ValueError as exc:
            raise _invalid(exc) from exc
        body = {"attenuated": att.tolist()}
        if req.threshold is not None:
            mask = binarize(att, req.threshold)
            body["mask"] = mask.tolist()
            if req.gt_mask is not None:
                gt = _grid(req.gt_mask, "gt_mask") > 0.5
                try:
                    s = mask_metrics(mask, gt)
                except ValueError as exc:
                    raise _invalid(exc) from exc
                body["iou"], body["f1"] = s.iou, s.f1
        return body

    @app.post("/fit-uncertainty", response_model=schemas.FitUncertaintyResponse)
    def fit_uncertainty(req: schemas.FitUncertaintyRequest):
        try:
            scene = _scene(req.scene)
            views = [(_camera(v.camera), _grid(v.residual, "residual")) for v in req.views]
            cfg = UncertFitConfig(
                iterations=req.iterations,
                learning_rate=req.learning_rate,
                lambda_reg=req.lambda_reg,
                prior_level=req.prior_level,
                background_prior=req.background_prior,
                seed=req.seed,
            )
            fit = fit_uncertainty_direct if req.solver == "direct" else fit_uncertainty_sgd
            fitted = fit(scene, views, cfg)
            objective = UncertaintyProblem.build(fitted, views, cfg).objective(fitted.uncert_coeffs.reshape(-1))
        except ValueError as exc:
            raise _invalid(exc) from exc
        return {"scene": fitted.to_dict(), "objective": objective}

    @app.post("/select-view", response_model=schemas.SelectViewResponse)
    def select_view(req: schemas.SelectViewRequest):
        try:
            scene = _scene(req.scene)
            cams = [_camera(c) for c in req.candidates]
        except ValueError as exc:
            raise _invalid(exc) from exc
        scores = candidate_scores(scene, cams, req.background_uncertainty, req.clamp)
        return {"index": int(np.argmax(scores)), "scores": scores.tolist()}

    return app


app = create_app()
