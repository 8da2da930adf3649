"""Seeded synthetic scenes, orbit trajectories, degradations and change injection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .avs import farthest_point_init
from .raster import render
from .scene import Camera, Scene
from .sh import SH_C0, sh_basis_size

DEGRADATIONS = ("none", "subsample", "jitter")


@dataclass(frozen=True)
class ChangeRegion:
    center: tuple[float, float, float]
    radius: float
    kind: str = "insert"  # "insert" adds blobs, "remove" deletes primitives inside the sphere
    color: tuple[float, float, float] = (0.95, 0.1, 0.1)
    count: int = 6

    def __post_init__(self):
        if self.kind not in ("insert", "remove"):
            raise ValueError(f"unknown change kind {self.kind!r}")
        if self.radius <= 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class SyntheticSpec:
    primitive_count: int = 200
    extent: float = 1.0  # half side of the box holding the means
    orbit_radius: float = 3.5
    elevation_deg: float = 20.0
    view_count: int = 32
    width: int = 32
    height: int = 32
    fov_deg: float = 45.0
    holdout_every: int = 8
    degradation: str = "none"
    subsample_fraction: float = 0.5  # fraction removed in "subsample" mode
    jitter_sigma: float = 0.05
    fitted_color_degree: int | None = None  # SH truncation of the scene handed to the fitter
    reset_color: bool = False  # start the fitter from flat gray colors
    scale_range: tuple[float, float] = (0.08, 0.22)
    opacity_range: tuple[float, float] = (0.5, 0.95)
    view_dependence: float = 0.15
    sh_degree_color: int = 3
    sh_degree_uncert: int = 3
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    backdrop_count: int = 0  # large blobs on an enclosing sphere so every ray hits geometry
    backdrop_radius: float = 7.0
    changes: tuple[ChangeRegion, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.primitive_count <= 0:
            raise ValueError("primitive_count must be positive")
        if self.view_count < 2:
            raise ValueError("a trajectory needs at least 2 views")
        if self.degradation not in DEGRADATIONS:
            raise ValueError(f"unknown degradation {self.degradation!r}")
        if not 0.0 <= self.subsample_fraction < 1.0:
            raise ValueError("subsample_fraction must lie in [0, 1)")
        if self.holdout_every < 2:
            raise ValueError("holdout_every must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["changes"] = [asdict(c) for c in self.changes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["changes"] = tuple(ChangeRegion(**c) for c in d.get("changes", ()))
        for key in ("scale_range", "opacity_range", "background"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _random_quats(rng, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _color_coeffs(rng, n: int, degree: int, base: np.ndarray, view_dependence: float) -> np.ndarray:
    s = sh_basis_size(degree)
    c = np.zeros((n, 3, s))
    c[:, :, 0] = base / SH_C0
    if s > 1:
        c[:, :, 1:] = rng.normal(0.0, view_dependence, size=(n, 3, s - 1))
    return c


def random_primitives(spec: SyntheticSpec, rng, n: int | None = None, center=None, extent=None) -> Scene:
    n = spec.primitive_count if n is None else n
    extent = spec.extent if extent is None else extent
    center = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
    means = center + rng.uniform(-extent, extent, size=(n, 3))
    lo, hi = spec.scale_range
    scales = np.exp(rng.uniform(math.log(lo), math.log(hi), size=(n, 3)))
    opac = rng.uniform(*spec.opacity_range, size=n)
    base = rng.uniform(0.15, 0.85, size=(n, 3))
    color = _color_coeffs(rng, n, spec.sh_degree_color, base, spec.view_dependence)
    return Scene.from_arrays(
        means, _random_quats(rng, n), scales, opac, color, None,
        spec.sh_degree_color, spec.sh_degree_uncert, spec.background,
    )


def backdrop_primitives(spec: SyntheticSpec, rng) -> Scene:
    """Blobs on a Fibonacci sphere around the whole trajectory."""
    n = spec.backdrop_count
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5.0**0.5) * i
    r = np.sqrt(1.0 - z * z)
    dirs = np.stack([r * np.cos(phi), z, r * np.sin(phi)], axis=1)
    means = spec.backdrop_radius * dirs + rng.normal(0.0, 0.1, size=(n, 3))
    spacing = spec.backdrop_radius * math.sqrt(4 * math.pi / n)
    scales = spacing * rng.uniform(0.45, 0.65, size=(n, 3))
    base = rng.uniform(0.2, 0.8, size=(n, 3))
    color = _color_coeffs(rng, n, spec.sh_degree_color, base, 0.5 * spec.view_dependence)
    return Scene.from_arrays(
        means, _random_quats(rng, n), scales, np.full(n, 0.9), color, None,
        spec.sh_degree_color, spec.sh_degree_uncert, spec.background,
    )


def orbit_cameras(spec: SyntheticSpec) -> list[Camera]:
    """Evenly spaced cameras on a circle at fixed elevation, all looking at the origin."""
    f = 0.5 * spec.width / math.tan(math.radians(spec.fov_deg) / 2)
    el = math.radians(spec.elevation_deg)
    cams = []
    for i in range(spec.view_count):
        az = 2 * math.pi * i / spec.view_count
        eye = spec.orbit_radius * np.array(
            [math.cos(el) * math.sin(az), -math.sin(el), -math.cos(el) * math.cos(az)]
        )
        cams.append(Camera.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), f, f, spec.width, spec.height))
    return cams


def generate_scene(spec: SyntheticSpec) -> tuple[Scene, list[Camera], list[np.ndarray]]:
    """Ground-truth scene, orbit cameras and the images rendered from them."""
    rng = np.random.default_rng(spec.seed)
    truth = random_primitives(spec, rng)
    if spec.backdrop_count > 0:
        back = backdrop_primitives(spec, rng)
        truth = Scene(truth.primitives + back.primitives, truth.sh_degree_color, truth.sh_degree_uncert, truth.background_color)
    cams = orbit_cameras(spec)
    images = [render(truth, c).color for c in cams]
    return truth, cams, images


def truncate_color_degree(scene: Scene, degree: int) -> Scene:
    s = sh_basis_size(degree)
    prims = [p.replace(color_sh=p.color_sh[:, :s]) for p in scene.primitives]
    return Scene(prims, degree, scene.sh_degree_uncert, scene.background_color)


def degrade_scene(truth: Scene, spec: SyntheticSpec, seed: int | None = None) -> Scene:
    """Starting point for the base fitter, damaged according to ``spec.degradation``."""
    rng = np.random.default_rng(spec.seed + 1 if seed is None else seed)
    scene = truth
    if spec.degradation == "subsample":
        n = len(truth)
        keep = max(1, int(round(n * (1.0 - spec.subsample_fraction))))
        scene = truth.subset(np.sort(rng.choice(n, size=keep, replace=False)))
    elif spec.degradation == "jitter":
        prims = [p.replace(mean=p.mean + rng.normal(0.0, spec.jitter_sigma, 3)) for p in truth.primitives]
        scene = Scene(prims, truth.sh_degree_color, truth.sh_degree_uncert, truth.background_color)
    if spec.reset_color:
        gray = np.zeros((3, sh_basis_size(scene.sh_degree_color)))
        gray[:, 0] = 0.5 / SH_C0
        prims = [p.replace(color_sh=gray) for p in scene.primitives]
        scene = Scene(prims, scene.sh_degree_color, scene.sh_degree_uncert, scene.background_color)
    if spec.fitted_color_degree is not None:
        scene = truncate_color_degree(scene, spec.fitted_color_degree)
    return scene


def apply_changes(scene: Scene, changes, seed: int = 0) -> Scene:
    """Insert blobs into or remove primitives from spherical regions."""
    rng = np.random.default_rng(seed)
    prims = list(scene.primitives)
    s = sh_basis_size(scene.sh_degree_color)
    su = sh_basis_size(scene.sh_degree_uncert)
    for ch in changes:
        c = np.asarray(ch.center, dtype=np.float64)
        if ch.kind == "remove":
            prims = [p for p in prims if np.linalg.norm(p.mean - c) > ch.radius]
            continue
        for _ in range(ch.count):
            offset = rng.uniform(-0.5, 0.5, 3) * ch.radius
            color = np.zeros((3, s))
            color[:, 0] = np.asarray(ch.color) / SH_C0
            prims.append(
                prims[0].replace(
                    mean=c + offset,
                    rotation=_random_quats(rng, 1)[0],
                    scale=np.full(3, 0.45 * ch.radius),
                    opacity=0.95,
                    color_sh=color,
                    uncert_sh=np.zeros(su),
                )
            )
    return Scene(prims, scene.sh_degree_color, scene.sh_degree_uncert, scene.background_color)


def holdout_split(n_views: int, every: int = 8) -> tuple[list[int], list[int]]:
    """Every ``every``-th view (starting at 0) is held out."""
    test = [i for i in range(n_views) if i % every == 0]
    train = [i for i in range(n_views) if i % every != 0]
    return train, test


def make_sparse_split(cameras, k: int = 4, every: int = 8) -> tuple[list[int], list[int]]:
    """Farthest-point training views; every ``every``-th remaining view is a test view."""
    if len(cameras) < k + 1:
        raise ValueError(f"need at least {k + 1} cameras for a {k}-view split")
    train = farthest_point_init(cameras, k)
    remaining = [i for i in range(len(cameras)) if i not in train]
    return train, remaining[::every]


def with_spec(spec: SyntheticSpec, **changes) -> SyntheticSpec:
    return replace(spec, **changes)
