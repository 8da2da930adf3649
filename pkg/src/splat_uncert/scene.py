"""Scene primitives, cameras and their JSON serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .sh import degree_from_size, sh_basis_size, sh_dot, sh_evaluate


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion stored as (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


@dataclass(frozen=True, eq=False)
class Primitive:
    """One anisotropic 3D Gaussian.

    ``opacity`` is stored post-activation.  ``color_sh`` has shape ``(3, s)`` and
    ``uncert_sh`` shape ``(s,)`` with ``s = (L+1)**2``.
    """

    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color_sh: np.ndarray
    uncert_sh: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "rotation", _frozen(self.rotation))
        object.__setattr__(self, "scale", _frozen(self.scale))
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "color_sh", _frozen(self.color_sh).reshape(3, -1))
        object.__setattr__(self, "uncert_sh", _frozen(self.uncert_sh).reshape(-1))
        if self.mean.shape != (3,) or self.scale.shape != (3,) or self.rotation.shape != (4,):
            raise ValueError("mean/scale must be 3-vectors and rotation a 4-vector")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation quaternion must have unit norm")
        if not np.all(self.scale > 0):
            raise ValueError("scale components must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError(f"opacity must lie in (0, 1), got {self.opacity}")

    @property
    def uncert_degree(self) -> int:
        return degree_from_size(self.uncert_sh.size)

    def replace(self, **changes) -> "Primitive":
        fields = dict(
            mean=self.mean,
            rotation=self.rotation,
            scale=self.scale,
            opacity=self.opacity,
            color_sh=self.color_sh,
            uncert_sh=self.uncert_sh,
        )
        fields.update(changes)
        return Primitive(**fields)


def covariance_from_primitive(p: Primitive) -> np.ndarray:
    r = quat_to_rotmat(p.rotation)
    m = r * p.scale[None, :]
    return m @ m.T


def evaluate_uncertainty(p: Primitive, direction, degree: int | None = None) -> float:
    """Raw (unclamped) directional uncertainty of one primitive."""
    if degree is not None and sh_basis_size(degree) != p.uncert_sh.size:
        raise ValueError(
            f"primitive has {p.uncert_sh.size} uncertainty coefficients, degree {degree} needs "
            f"{sh_basis_size(degree)}"
        )
    basis = sh_evaluate(p.uncert_degree, direction)
    return float(sh_dot(basis, p.uncert_sh))


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # world-to-camera, 3x3
    translation: np.ndarray  # world-to-camera, 3

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation).reshape(3, 3))
        object.__setattr__(self, "translation", _frozen(self.translation).reshape(3))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` looking at ``target``; image y points along ``-up``."""
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(
            fx=fx,
            fy=fy,
            cx=(width - 1) / 2 if cx is None else cx,
            cy=(height - 1) / 2 if cy is None else cy,
            width=width,
            height=height,
            rotation=rot,
            translation=-rot @ eye,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=d["fx"],
            fy=d["fy"],
            cx=d["cx"],
            cy=d["cy"],
            width=d["width"],
            height=d["height"],
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=d["translation"],
        )


@dataclass(frozen=True, eq=False)
class Scene:
    primitives: tuple[Primitive, ...]
    sh_degree_color: int = 3
    sh_degree_uncert: int = 3
    background_color: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "background_color", _frozen(self.background_color).reshape(3))
        sc, su = sh_basis_size(self.sh_degree_color), sh_basis_size(self.sh_degree_uncert)
        for i, p in enumerate(self.primitives):
            if p.color_sh.shape != (3, sc) or p.uncert_sh.shape != (su,):
                raise ValueError(
                    f"primitive {i} coefficient shapes {p.color_sh.shape}/{p.uncert_sh.shape} "
                    f"do not match degrees ({self.sh_degree_color}, {self.sh_degree_uncert})"
                )

    def __len__(self) -> int:
        return len(self.primitives)

    # Stacked views used by the vectorized renderers.
    @cached_property
    def means(self) -> np.ndarray:
        return _frozen([p.mean for p in self.primitives]).reshape(-1, 3)

    @cached_property
    def rotations(self) -> np.ndarray:
        return _frozen([p.rotation for p in self.primitives]).reshape(-1, 4)

    @cached_property
    def scales(self) -> np.ndarray:
        return _frozen([p.scale for p in self.primitives]).reshape(-1, 3)

    @cached_property
    def opacities(self) -> np.ndarray:
        return _frozen([p.opacity for p in self.primitives]).reshape(-1)

    @cached_property
    def color_coeffs(self) -> np.ndarray:
        return _frozen([p.color_sh for p in self.primitives]).reshape(
            -1, 3, sh_basis_size(self.sh_degree_color)
        )

    @cached_property
    def uncert_coeffs(self) -> np.ndarray:
        return _frozen([p.uncert_sh for p in self.primitives]).reshape(
            -1, sh_basis_size(self.sh_degree_uncert)
        )

    @cached_property
    def covariances(self) -> np.ndarray:
        r = quats_to_rotmats(self.rotations)
        m = r * self.scales[:, None, :]
        return m @ np.transpose(m, (0, 2, 1))

    @classmethod
    def from_arrays(
        cls,
        means,
        rotations,
        scales,
        opacities,
        color_sh,
        uncert_sh=None,
        sh_degree_color: int = 3,
        sh_degree_uncert: int = 3,
        background_color=(0.0, 0.0, 0.0),
    ) -> "Scene":
        n = len(means)
        if uncert_sh is None:
            uncert_sh = np.zeros((n, sh_basis_size(sh_degree_uncert)))
        prims = [
            Primitive(means[i], rotations[i], scales[i], opacities[i], color_sh[i], uncert_sh[i])
            for i in range(n)
        ]
        return cls(prims, sh_degree_color, sh_degree_uncert, np.asarray(background_color))

    def with_uncertainty(self, coeffs, sh_degree_uncert: int | None = None) -> "Scene":
        """Copy of the scene with replaced uncertainty coefficients, shape ``(K, s)``."""
        degree = self.sh_degree_uncert if sh_degree_uncert is None else sh_degree_uncert
        coeffs = np.asarray(coeffs, dtype=np.float64).reshape(len(self), sh_basis_size(degree))
        prims = [p.replace(uncert_sh=coeffs[i]) for i, p in enumerate(self.primitives)]
        return Scene(prims, self.sh_degree_color, degree, self.background_color)

    def subset(self, indices: Iterable[int]) -> "Scene":
        prims = [self.primitives[i] for i in indices]
        return Scene(prims, self.sh_degree_color, self.sh_degree_uncert, self.background_color)

    def to_dict(self) -> dict:
        return {
            "sh_degree_color": self.sh_degree_color,
            "sh_degree_uncert": self.sh_degree_uncert,
            "background_color": [float(v) for v in self.background_color],
            "primitives": [
                {
                    "mean": [float(v) for v in p.mean],
                    "rotation": [float(v) for v in p.rotation],
                    "scale": [float(v) for v in p.scale],
                    "opacity": p.opacity,
                    "color_sh": [float(v) for v in p.color_sh.reshape(-1)],
                    "uncert_sh": [float(v) for v in p.uncert_sh],
                }
                for p in self.primitives
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        prims = [
            Primitive(
                mean=p["mean"],
                rotation=p["rotation"],
                scale=p["scale"],
                opacity=p["opacity"],
                color_sh=np.asarray(p["color_sh"], dtype=np.float64).reshape(3, -1),
                uncert_sh=p["uncert_sh"],
            )
            for p in d["primitives"]
        ]
        return cls(
            prims,
            int(d["sh_degree_color"]),
            int(d["sh_degree_uncert"]),
            np.asarray(d.get("background_color", [0.0, 0.0, 0.0])),
        )


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene.to_dict(), indent=1)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(dumps_scene(scene), encoding="utf-8")


def load_scene(path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_cameras(cameras: Sequence[Camera], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1), encoding="utf-8")


def load_cameras(path) -> list[Camera]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = [data]
    return [Camera.from_dict(d) for d in data]
