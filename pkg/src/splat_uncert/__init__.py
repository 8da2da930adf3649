"""Post-hoc per-primitive SH uncertainty for Gaussian splatting scenes."""

__version__ = "0.1.0"

from .raster import RenderOptions, RenderOutput, render, render_with_weights
from .scene import Camera, Primitive, Scene, load_cameras, load_scene, save_cameras, save_scene
from .sh import sh_basis_size, sh_evaluate
from .solver import UncertFitConfig, fit_uncertainty_direct, fit_uncertainty_sgd

__all__ = [
    "Camera",
    "Primitive",
    "RenderOptions",
    "RenderOutput",
    "Scene",
    "UncertFitConfig",
    "fit_uncertainty_direct",
    "fit_uncertainty_sgd",
    "load_cameras",
    "load_scene",
    "render",
    "render_with_weights",
    "save_cameras",
    "save_scene",
    "sh_basis_size",
    "sh_evaluate",
]
