"""Request and response models for the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

Grid = list[list[float]]


class CameraModel(BaseModel):
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    rotation: list[float] = Field(min_length=9, max_length=9)
    translation: list[float] = Field(min_length=3, max_length=3)


class PrimitiveModel(BaseModel):
    mean: list[float] = Field(min_length=3, max_length=3)
    rotation: list[float] = Field(min_length=4, max_length=4)
    scale: list[float] = Field(min_length=3, max_length=3)
    opacity: float
    color_sh: list[float]
    uncert_sh: list[float]


class SceneModel(BaseModel):
    sh_degree_color: int = Field(ge=0)
    sh_degree_uncert: int = Field(ge=0)
    background_color: list[float] = Field(default=[0.0, 0.0, 0.0], min_length=3, max_length=3)
    primitives: list[PrimitiveModel]


class RenderRequest(BaseModel):
    scene: SceneModel
    camera: CameraModel
    background_uncertainty: float = 0.0


class RenderResponse(BaseModel):
    width: int
    height: int
    color: list[list[list[float]]]
    uncertainty: Grid
    uncertainty_raw: Grid
    final_transmittance: Grid


class MetricsRequest(BaseModel):
    error: Grid
    uncertainty: Grid


class MetricsResponse(BaseModel):
    ause: float
    pearson: float
    degenerate: bool


class AttenuateRequest(BaseModel):
    raw: Grid
    uncertainty: Grid
    threshold: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    gt_mask: Optional[Grid] = None


class AttenuateResponse(BaseModel):
    attenuated: Grid
    mask: Optional[list[list[int]]] = None
    iou: Optional[float] = None
    f1: Optional[float] = None


class ResidualView(BaseModel):
    camera: CameraModel
    residual: Grid


class FitUncertaintyRequest(BaseModel):
    scene: SceneModel
    views: list[ResidualView] = Field(min_length=1)
    iterations: int = Field(default=400, ge=0)
    learning_rate: float = Field(default=0.01, gt=0)
    lambda_reg: float = Field(default=0.0, ge=0)
    prior_level: float = Field(default=1.0, ge=0)
    background_prior: Optional[bool] = None
    solver: Literal["sgd", "direct"] = "sgd"
    seed: int = 0


class FitUncertaintyResponse(BaseModel):
    scene: SceneModel
    objective: float


class SelectViewRequest(BaseModel):
    scene: SceneModel
    candidates: list[CameraModel] = Field(min_length=1)
    background_uncertainty: float = 0.0
    clamp: bool = False


class SelectViewResponse(BaseModel):
    index: int
    scores: list[float]


class HealthResponse(BaseModel):
    status: str
    version: str
