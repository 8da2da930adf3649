"""CPU Gaussian-splatting rasterizer.

Primitives are projected with the EWA local-affine approximation, sorted once
per view by camera-space depth and alpha-blended front to back per pixel.
The same blending pass renders color, raw uncertainty and, on request, the
blend weights ``alpha_k * T_k`` that make up the rows of the uncertainty
system matrix.

Conventions follow the reference 3DGS rasterizer: +0.3 px^2 low-pass dilation,
alpha clamped to 0.99, contributions below 1/255 skipped, and blending stops
before a contribution would push transmittance below 1e-4.  Pixel ``(row, col)``
is evaluated at image coordinates ``(x=col, y=row)``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np
import scipy.sparse as sp

from .scene import Camera, Primitive, Scene, covariance_from_primitive
from .sh import sh_basis_size, sh_dot, sh_evaluate

NEAR_PLANE = 0.01
LOWPASS_DILATION = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
BAND_ROWS = 16
FRUSTUM_SLACK = 1.3  # Jacobian evaluated with x/z, y/z clamped to this multiple of the half-FOV tangent


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("SPLAT_UNCERT_THREADS")
    return max(1, int(env)) if env else 1


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    view_dir: np.ndarray
    primitive_index: int
    radius: int

    @property
    def conic(self) -> np.ndarray:
        return np.linalg.inv(self.cov2d)


@dataclass(frozen=True)
class RenderOptions:
    """``background_uncertainty`` is the value blended into uncovered pixels.

    ``direction_mode`` selects how the SH view direction is chosen: ``"mean"``
    uses camera center to primitive mean, ``"pixel"`` uses the pixel ray.
    """

    background_uncertainty: float = 0.0
    direction_mode: str = "mean"
    workers: int | None = None


@dataclass(frozen=True)
class RenderOutput:
    color: np.ndarray  # (H, W, 3), clamped to [0, 1]
    uncertainty: np.ndarray  # (H, W), clamped to [0, 1]
    uncertainty_raw: np.ndarray  # (H, W), unclamped, includes background term
    final_transmittance: np.ndarray  # (H, W)


class BlendRecord(NamedTuple):
    pixel_index: int
    entries: list  # [(primitive_index, weight, view_dir), ...] front to back


@dataclass(frozen=True)
class BlendWeights:
    """Sparse blend weights of one view in coordinate form.

    Entries are sorted by pixel and, within a pixel, front to back.  ``dirs``
    holds the view direction of every entry.
    """

    height: int
    width: int
    pixel: np.ndarray
    primitive: np.ndarray
    weight: np.ndarray
    dirs: np.ndarray
    final_transmittance: np.ndarray
    n_primitives: int

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def records(self) -> Iterator[BlendRecord]:
        bounds = np.searchsorted(self.pixel, np.arange(self.n_pixels + 1))
        for j in range(self.n_pixels):
            lo, hi = bounds[j], bounds[j + 1]
            yield BlendRecord(
                j,
                [
                    (int(self.primitive[e]), float(self.weight[e]), self.dirs[e])
                    for e in range(lo, hi)
                ],
            )

    def entry_values(self, uncert_coeffs: np.ndarray) -> np.ndarray:
        """``u_k(d)`` evaluated for every entry."""
        s = uncert_coeffs.shape[1]
        basis = sh_evaluate(math.isqrt(s) - 1, self.dirs) if len(self.dirs) else np.zeros((0, s))
        return sh_dot(basis, uncert_coeffs[self.primitive])

    def apply_sequential(self, uncert_coeffs: np.ndarray) -> np.ndarray:
        """Blend ``u_k(d)`` per pixel in front-to-back order, as the renderer does.

        Returns the flat vector of raw blended uncertainties without background.
        """
        vals = self.weight * self.entry_values(uncert_coeffs)
        out = np.zeros(self.n_pixels)
        # Front-to-back order is preserved because every pass adds the k-th
        # entry of each pixel, one pass per blending depth.
        starts = np.searchsorted(self.pixel, np.arange(self.n_pixels))
        rank = np.arange(len(self.pixel)) - starts[self.pixel]
        for r in range(int(rank.max()) + 1 if len(rank) else 0):
            sel = rank == r
            out[self.pixel[sel]] += vals[sel]
        return out

    def system_matrix(self, sh_degree: int) -> sp.csr_matrix:
        """SH-expanded matrix with entries ``w * Y_i(d)`` at column ``s*k + i``."""
        s = sh_basis_size(sh_degree)
        basis = sh_evaluate(sh_degree, self.dirs) if len(self.dirs) else np.zeros((0, s))
        rows = np.repeat(self.pixel, s)
        cols = (self.primitive[:, None] * s + np.arange(s)[None, :]).reshape(-1)
        vals = (self.weight[:, None] * basis).reshape(-1)
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_pixels, s * self.n_primitives))


# --------------------------------------------------------------------------
# Projection
# --------------------------------------------------------------------------


class Projection(NamedTuple):
    mean2d: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 2, 2)
    conic: np.ndarray  # (K, 3): a, b, c of the inverse covariance
    depth: np.ndarray  # (K,)
    radius: np.ndarray  # (K,) int
    view_dir: np.ndarray  # (K, 3)
    visible: np.ndarray  # (K,) bool


def jacobian_limits(cam: Camera) -> tuple[float, float]:
    return FRUSTUM_SLACK * 0.5 * cam.width / cam.fx, FRUSTUM_SLACK * 0.5 * cam.height / cam.fy


def _screen_radius(cov2d: np.ndarray) -> np.ndarray:
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(0.1, mid * mid - det))
    return np.ceil(3.0 * np.sqrt(lam)).astype(np.int64)


def project_scene(scene: Scene, cam: Camera) -> Projection:
    means = scene.means
    k = means.shape[0]
    w = cam.rotation
    pc = means @ w.T + cam.translation
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    in_front = z > NEAR_PLANE
    zs = np.where(in_front, z, 1.0)
    lim_x, lim_y = jacobian_limits(cam)
    tx = np.clip(x / zs, -lim_x, lim_x)
    ty = np.clip(y / zs, -lim_y, lim_y)
    jac = np.zeros((k, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * tx / zs
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * ty / zs
    t = jac @ w
    cov2d = t @ scene.covariances @ np.transpose(t, (0, 2, 1))
    cov2d[:, 0, 0] += LOWPASS_DILATION
    cov2d[:, 1, 1] += LOWPASS_DILATION
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    ok = in_front & (det > 0)
    safe_det = np.where(ok, det, 1.0)
    conic = np.stack(
        [cov2d[:, 1, 1] / safe_det, -cov2d[:, 0, 1] / safe_det, cov2d[:, 0, 0] / safe_det], axis=1
    )
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    radius = _screen_radius(cov2d)
    hits = (
        (mean2d[:, 0] + radius >= 0)
        & (mean2d[:, 0] - radius <= cam.width - 1)
        & (mean2d[:, 1] + radius >= 0)
        & (mean2d[:, 1] - radius <= cam.height - 1)
    )
    view = means - cam.center
    view_dir = view / np.linalg.norm(view, axis=1, keepdims=True)
    return Projection(mean2d, cov2d, conic, z, radius, view_dir, ok & hits)


def project_primitive(p: Primitive, cam: Camera, index: int = 0) -> Splat2D | None:
    """Project one primitive; returns ``None`` when it is culled."""
    pc = cam.rotation @ p.mean + cam.translation
    x, y, z = pc
    if z <= NEAR_PLANE:
        return None
    lim_x, lim_y = jacobian_limits(cam)
    tx = min(max(x / z, -lim_x), lim_x)
    ty = min(max(y / z, -lim_y), lim_y)
    jac = np.array([[cam.fx / z, 0.0, -cam.fx * tx / z], [0.0, cam.fy / z, -cam.fy * ty / z]])
    t = jac @ cam.rotation
    cov2d = t @ covariance_from_primitive(p) @ t.T + LOWPASS_DILATION * np.eye(2)
    if np.linalg.det(cov2d) <= 0:
        return None
    mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    radius = int(_screen_radius(cov2d[None])[0])
    if (
        mean2d[0] + radius < 0
        or mean2d[0] - radius > cam.width - 1
        or mean2d[1] + radius < 0
        or mean2d[1] - radius > cam.height - 1
    ):
        return None
    view = p.mean - cam.center
    return Splat2D(mean2d, cov2d, float(z), view / np.linalg.norm(view), index, radius)


def alpha_at(s: Splat2D, opacity: float, pixel) -> float:
    """Blending opacity of a splat at one pixel, 0 when the contribution is skipped."""
    d = np.asarray(pixel, dtype=np.float64) - s.mean2d
    a, b, c = s.cov2d[1, 1], -s.cov2d[0, 1], s.cov2d[0, 0]
    det = s.cov2d[0, 0] * s.cov2d[1, 1] - s.cov2d[0, 1] ** 2
    power = -0.5 * (a * d[0] ** 2 + c * d[1] ** 2) / det - b * d[0] * d[1] / det
    if power > 0:
        return 0.0
    alpha = min(ALPHA_MAX, opacity * math.exp(power))
    return 0.0 if alpha < ALPHA_MIN else alpha


# --------------------------------------------------------------------------
# Blending
# --------------------------------------------------------------------------


def _pixel_dirs(cam: Camera, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    xs = (cols[None, :] - cam.cx) / cam.fx
    ys = (rows[:, None] - cam.cy) / cam.fy
    d_cam = np.stack(np.broadcast_arrays(xs, ys, np.ones_like(xs * ys)), axis=-1)
    d_world = d_cam @ cam.rotation
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def _render_band(
    scene: Scene,
    cam: Camera,
    proj: Projection,
    order: np.ndarray,
    row0: int,
    row1: int,
    opts: RenderOptions,
    want_weights: bool,
    color_mean: np.ndarray,
    uncert_mean: np.ndarray,
):
    width = cam.width
    nrows = row1 - row0
    color = np.zeros((nrows, width, 3))
    unc = np.zeros((nrows, width))
    trans = np.ones((nrows, width))
    done = np.zeros((nrows, width), dtype=bool)
    entries = []
    pixel_mode = opts.direction_mode == "pixel"
    deg_c, deg_u = scene.sh_degree_color, scene.sh_degree_uncert
    for k in order:
        mx, my = proj.mean2d[k]
        r = proj.radius[k]
        y0 = max(row0, int(math.ceil(my - r)))
        y1 = min(row1 - 1, int(math.floor(my + r)))
        x0 = max(0, int(math.ceil(mx - r)))
        x1 = min(width - 1, int(math.floor(mx + r)))
        if y0 > y1 or x0 > x1:
            continue
        rows = np.arange(y0, y1 + 1, dtype=np.float64)
        cols = np.arange(x0, x1 + 1, dtype=np.float64)
        dx = cols[None, :] - mx
        dy = rows[:, None] - my
        ca, cb, cc = proj.conic[k]
        power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
        alpha = np.minimum(ALPHA_MAX, scene.opacities[k] * np.exp(power))
        sy = slice(y0 - row0, y1 - row0 + 1)
        sx = slice(x0, x1 + 1)
        t_reg = trans[sy, sx]
        done_reg = done[sy, sx]
        live = (~done_reg) & (power <= 0) & (alpha >= ALPHA_MIN)
        if not live.any():
            continue
        test_t = t_reg * (1.0 - alpha)
        stop = live & (test_t < T_MIN)
        take = live & ~stop
        done_reg |= stop
        if not take.any():
            continue
        w = alpha * t_reg
        if pixel_mode:
            dirs = _pixel_dirs(cam, rows, cols)
            c_k = sh_dot(sh_evaluate(deg_c, dirs)[:, :, None, :], scene.color_coeffs[k])
            u_k = sh_dot(sh_evaluate(deg_u, dirs), scene.uncert_coeffs[k])
            color[sy, sx][take] += w[take][:, None] * c_k[take]
            unc[sy, sx][take] += w[take] * u_k[take]
        else:
            dirs = None
            c_view = color[sy, sx]
            c_view[take] += w[take][:, None] * color_mean[k][None, :]
            u_view = unc[sy, sx]
            u_view[take] += w[take] * uncert_mean[k]
        t_reg[take] = test_t[take]
        if want_weights:
            ii, jj = np.nonzero(take)
            pix = (ii + y0) * width + (jj + x0)
            if pixel_mode:
                edirs = dirs[ii, jj]
            else:
                edirs = np.broadcast_to(proj.view_dir[k], (len(pix), 3))
            entries.append((pix, np.full(len(pix), k), w[ii, jj], edirs))
    return color, unc, trans, entries


def _render(scene: Scene, cam: Camera, opts: RenderOptions, want_weights: bool):
    h, w = cam.height, cam.width
    if len(scene) == 0:
        proj = None
        order = np.zeros(0, dtype=np.int64)
        color_mean = uncert_mean = None
    else:
        proj = project_scene(scene, cam)
        vis = np.nonzero(proj.visible)[0]
        order = vis[np.argsort(proj.depth[vis], kind="stable")]
        basis_c = sh_evaluate(scene.sh_degree_color, proj.view_dir)
        color_mean = sh_dot(basis_c[:, None, :], scene.color_coeffs)
        uncert_mean = sh_dot(sh_evaluate(scene.sh_degree_uncert, proj.view_dir), scene.uncert_coeffs)
    bands = [(r0, min(h, r0 + BAND_ROWS)) for r0 in range(0, h, BAND_ROWS)]

    def run(band):
        return _render_band(
            scene, cam, proj, order, band[0], band[1], opts, want_weights, color_mean, uncert_mean
        )

    n_workers = worker_count(opts.workers)
    if n_workers > 1 and len(bands) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run, bands))
    else:
        results = [run(b) for b in bands]

    color = np.concatenate([r[0] for r in results], axis=0)
    unc = np.concatenate([r[1] for r in results], axis=0)
    trans = np.concatenate([r[2] for r in results], axis=0)
    if len(scene) == 0:
        color = np.zeros((h, w, 3))
        unc = np.zeros((h, w))
        trans = np.ones((h, w))
    color = color + scene.background_color[None, None, :] * trans[:, :, None]
    unc_raw = unc + opts.background_uncertainty * trans
    out = RenderOutput(
        color=np.clip(color, 0.0, 1.0),
        uncertainty=np.clip(unc_raw, 0.0, 1.0),
        uncertainty_raw=unc_raw,
        final_transmittance=trans,
    )
    if not want_weights:
        return out, None
    parts = [e for r in results for e in r[3]]
    if parts:
        pix = np.concatenate([p[0] for p in parts])
        prim = np.concatenate([p[1] for p in parts])
        wt = np.concatenate([p[2] for p in parts])
        dirs = np.concatenate([p[3] for p in parts])
        idx = np.argsort(pix, kind="stable")
        pix, prim, wt, dirs = pix[idx], prim[idx], wt[idx], dirs[idx]
    else:
        pix = np.zeros(0, dtype=np.int64)
        prim = np.zeros(0, dtype=np.int64)
        wt = np.zeros(0)
        dirs = np.zeros((0, 3))
    weights = BlendWeights(h, w, pix, prim, wt, dirs, trans.reshape(-1).copy(), len(scene))
    return out, weights


def render(scene: Scene, cam: Camera, options: RenderOptions | None = None) -> RenderOutput:
    return _render(scene, cam, options or RenderOptions(), False)[0]


def render_with_weights(
    scene: Scene, cam: Camera, options: RenderOptions | None = None
) -> tuple[RenderOutput, BlendWeights]:
    """Render and also return the per-pixel blend weights of every contribution."""
    return _render(scene, cam, options or RenderOptions(), True)
