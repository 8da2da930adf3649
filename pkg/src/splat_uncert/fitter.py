"""Photometric 3DGS fitter (no densification) used to produce the frozen base scene.

The differentiable forward pass is a dense torch re-implementation of the
rasterizer in :mod:`splat_uncert.raster`: same culling, same depth order, same
alpha clamp / skip / early-stop rules, evaluated for every primitive-pixel pair
inside the primitive's screen-space bounding box.  Gradients come from torch
autograd; :func:`finite_diff_grad_check` validates them against central
differences of the numpy renderer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import raster
from .photometric import DEFAULT_LAMBDA, SSIM_C1, SSIM_C2, gaussian_window
from .photometric import residual_values
from .scene import Camera, Scene
from .sh import monomial_exponents, monomial_to_sh

log = logging.getLogger(__name__)

DTYPE = torch.float64
OPACITY_LOGIT_LIMIT = 13.0


class FitError(RuntimeError):
    pass


@dataclass
class FitConfig:
    iterations: int = 1000
    lr_mean: float = 1e-3
    lr_mean_final: float = 1e-5
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lam: float = DEFAULT_LAMBDA
    batch: int = 1
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("lr_mean", "lr_rotation", "lr_scale", "lr_opacity", "lr_color"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class FitHistory:
    losses: list = field(default_factory=list)


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


class SceneParams:
    """Unconstrained torch leaf tensors for the photometric parameters."""

    GROUPS = ("mean", "rotation", "log_scale", "opacity_logit", "color_sh")

    def __init__(self, scene: Scene):
        self.template = scene
        self.mean = torch.tensor(np.array(scene.means), dtype=DTYPE, requires_grad=True)
        self.rotation = torch.tensor(np.array(scene.rotations), dtype=DTYPE, requires_grad=True)
        self.log_scale = torch.tensor(np.log(scene.scales), dtype=DTYPE, requires_grad=True)
        self.opacity_logit = torch.tensor(
            _logit(np.array(scene.opacities)), dtype=DTYPE, requires_grad=True
        )
        self.color_sh = torch.tensor(np.array(scene.color_coeffs), dtype=DTYPE, requires_grad=True)
        self.background = torch.tensor(np.array(scene.background_color), dtype=DTYPE)

    def tensors(self) -> dict[str, torch.Tensor]:
        return {g: getattr(self, g) for g in self.GROUPS}

    @torch.no_grad()
    def project_constraints(self) -> None:
        self.rotation /= self.rotation.norm(dim=1, keepdim=True)
        self.opacity_logit.clamp_(-OPACITY_LOGIT_LIMIT, OPACITY_LOGIT_LIMIT)

    def to_scene(self) -> Scene:
        with torch.no_grad():
            q = self.rotation / self.rotation.norm(dim=1, keepdim=True)
            q = q.numpy()
            q = q / np.linalg.norm(q, axis=1, keepdims=True)
            opacity = 1.0 / (1.0 + np.exp(-self.opacity_logit.numpy()))
            return Scene.from_arrays(
                self.mean.numpy().copy(),
                q,
                np.exp(self.log_scale.numpy()),
                opacity,
                self.color_sh.numpy().copy(),
                np.array(self.template.uncert_coeffs),
                self.template.sh_degree_color,
                self.template.sh_degree_uncert,
                self.template.background_color,
            )


def _rotmats(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=1, keepdim=True)
    w, x, y, z = q.unbind(1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z),
            2 * (x * y - w * z),
            2 * (x * z + w * y),
            2 * (x * y + w * z),
            1 - 2 * (x * x + z * z),
            2 * (y * z - w * x),
            2 * (x * z - w * y),
            2 * (y * z + w * x),
            1 - 2 * (x * x + y * y),
        ],
        dim=1,
    ).reshape(-1, 3, 3)


# --------------------------------------------------------------------------
# Differentiable forward
# --------------------------------------------------------------------------


def render_torch(params: SceneParams, cam: Camera, sh_degree: int) -> torch.Tensor:
    """Differentiable color render, ``(H, W, 3)`` clamped to [0, 1]."""
    h, w = cam.height, cam.width
    rot_w = torch.tensor(np.array(cam.rotation), dtype=DTYPE)
    t_w = torch.tensor(np.array(cam.translation), dtype=DTYPE)
    center = torch.tensor(cam.center, dtype=DTYPE)

    pc = params.mean @ rot_w.T + t_w
    z = pc[:, 2]
    in_front = (z > raster.NEAR_PLANE).detach()
    idx_front = torch.nonzero(in_front).reshape(-1)
    if idx_front.numel() == 0:
        return params.background.expand(h, w, 3).clamp(0, 1)

    pcf = pc[idx_front]
    x, y, zf = pcf[:, 0], pcf[:, 1], pcf[:, 2]
    zero = torch.zeros_like(zf)
    lim_x, lim_y = raster.jacobian_limits(cam)
    tx = torch.clamp(x / zf, -lim_x, lim_x)
    ty = torch.clamp(y / zf, -lim_y, lim_y)
    jac = torch.stack(
        [cam.fx / zf, zero, -cam.fx * tx / zf, zero, cam.fy / zf, -cam.fy * ty / zf],
        dim=1,
    ).reshape(-1, 2, 3)
    r = _rotmats(params.rotation[idx_front])
    m = r * torch.exp(params.log_scale[idx_front])[:, None, :]
    cov3 = m @ m.transpose(1, 2)
    t = jac @ rot_w
    cov2 = t @ cov3 @ t.transpose(1, 2)
    c00 = cov2[:, 0, 0] + raster.LOWPASS_DILATION
    c11 = cov2[:, 1, 1] + raster.LOWPASS_DILATION
    c01 = cov2[:, 0, 1]
    det = c00 * c11 - c01 * c01
    mean2d_x = cam.fx * x / zf + cam.cx
    mean2d_y = cam.fy * y / zf + cam.cy

    with torch.no_grad():
        cov_np = torch.stack([c00, c01, c01, c11], dim=1).reshape(-1, 2, 2).numpy()
        radius = torch.tensor(raster._screen_radius(cov_np), dtype=DTYPE)
        ok = (det > 0) & (mean2d_x + radius >= 0) & (mean2d_x - radius <= w - 1)
        ok &= (mean2d_y + radius >= 0) & (mean2d_y - radius <= h - 1)
        sel = torch.nonzero(ok).reshape(-1)
        order = sel[torch.argsort(zf[sel], stable=True)]
    if order.numel() == 0:
        return params.background.expand(h, w, 3).clamp(0, 1)

    prim = idx_front[order]
    det_o = det[order]
    ca, cb, cc = c11[order] / det_o, -c01[order] / det_o, c00[order] / det_o
    mx, my = mean2d_x[order], mean2d_y[order]

    # Candidate (pixel, primitive) pairs inside each bounding box, sorted by
    # pixel and then by depth order.
    with torch.no_grad():
        pairs = _box_pairs(mx.detach().numpy(), my.detach().numpy(), radius[order].numpy(), h, w)
    pix = torch.from_numpy(pairs[0])
    slot = torch.from_numpy(pairs[1])
    dx = (pix % w).to(DTYPE) - mx[slot]
    dy = torch.div(pix, w, rounding_mode="floor").to(DTYPE) - my[slot]
    power = -0.5 * (ca[slot] * dx * dx + cc[slot] * dy * dy) - cb[slot] * dx * dy
    opacity = torch.sigmoid(params.opacity_logit[prim])
    alpha = torch.clamp(opacity[slot] * torch.exp(power), max=raster.ALPHA_MAX)

    seg_start = torch.from_numpy(pairs[2])
    with torch.no_grad():
        live = (power <= 0) & (alpha >= raster.ALPHA_MIN)
        log_keep = torch.where(live, torch.log1p(-alpha), torch.zeros_like(alpha))
        incl = _segment_cumsum(log_keep, seg_start)
        stop = live & (incl < math.log(raster.T_MIN))
        stopped = _segment_cumsum(stop.to(DTYPE), seg_start) > 0
        take = live & ~stopped
    log_t = torch.where(take, torch.log1p(-alpha), torch.zeros_like(alpha))
    log_incl = _segment_cumsum(log_t, seg_start)
    t_excl = torch.exp(log_incl - log_t)
    weight = torch.where(take, alpha, torch.zeros_like(alpha)) * t_excl
    log_final = torch.zeros(h * w, dtype=DTYPE).index_add(0, pix, log_t)
    t_final = torch.exp(log_final)

    view = params.mean[prim] - center
    d = view / view.norm(dim=1, keepdim=True)
    color_k = torch.einsum("ks,kcs->kc", sh_basis_torch(sh_degree, d), params.color_sh[prim])
    img = torch.zeros(h * w, 3, dtype=DTYPE).index_add(0, pix, weight[:, None] * color_k[slot])
    img = img + t_final[:, None] * params.background[None, :]
    return img.reshape(h, w, 3).clamp(0.0, 1.0)


_MONO_CACHE: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}


def sh_basis_torch(degree: int, d: torch.Tensor) -> torch.Tensor:
    """SH basis of unit directions ``(K, 3)`` via monomials, differentiable."""
    if degree not in _MONO_CACHE:
        exps = torch.tensor(monomial_exponents(degree), dtype=DTYPE)
        _MONO_CACHE[degree] = (exps, torch.tensor(monomial_to_sh(degree), dtype=DTYPE))
    exps, mat = _MONO_CACHE[degree]
    if degree == 0:
        return torch.ones(d.shape[0], 1, dtype=DTYPE) @ mat
    # integer powers: d^0..d^degree per axis, then gather exponents
    powers = [torch.ones_like(d)]
    for _ in range(degree):
        powers.append(powers[-1] * d)
    pw = torch.stack(powers, dim=2)  # (K, 3, degree+1)
    e = exps.long()
    mono = pw[:, 0, e[:, 0]] * pw[:, 1, e[:, 1]] * pw[:, 2, e[:, 2]]
    return mono @ mat


def _box_pairs(mx, my, rad, h, w):
    """Pixel/slot pairs covered by each bounding box and per-entry segment starts."""
    cols = np.arange(w)
    rows = np.arange(h)
    in_x = np.abs(cols[None, :] - mx[:, None]) <= rad[:, None]
    in_y = np.abs(rows[None, :] - my[:, None]) <= rad[:, None]
    mask = in_y[:, :, None] & in_x[:, None, :]  # (P, H, W)
    flat = mask.reshape(len(mx), h * w).T  # (N, P), row-major = pixel then depth
    pix, slot = np.nonzero(flat)
    starts = np.searchsorted(pix, pix, side="left")
    return pix.astype(np.int64), slot.astype(np.int64), starts.astype(np.int64)


def _segment_cumsum(x: torch.Tensor, seg_start: torch.Tensor) -> torch.Tensor:
    """Inclusive cumulative sum restarting at every segment start."""
    c = torch.cumsum(x, dim=0)
    offset = torch.where(seg_start > 0, c[(seg_start - 1).clamp(min=0)], torch.zeros_like(c))
    return c - offset


_BLUR_CACHE: dict[int, torch.Tensor] = {}


def _blur_matrix(n: int) -> torch.Tensor:
    """Dense ``(n, n)`` operator of the symmetric-padded 1D Gaussian window."""
    if n not in _BLUR_CACHE:
        win = gaussian_window()
        half = len(win) // 2
        src = _reflect_index(n, half)
        mat = np.zeros((n, n))
        for i in range(n):
            np.add.at(mat[i], src[i : i + len(win)], win)
        _BLUR_CACHE[n] = torch.tensor(mat, dtype=DTYPE)
    return _BLUR_CACHE[n]


def _blur_torch(x: torch.Tensor) -> torch.Tensor:
    """Separable Gaussian blur of ``(B, H, W)`` maps with symmetric padding."""
    h, w = x.shape[-2:]
    return _blur_matrix(h) @ x @ _blur_matrix(w).T


def _reflect_index(n: int, half: int) -> np.ndarray:
    idx = np.arange(-half, n + half)
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def ssim_map_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    x, y = a.permute(2, 0, 1), b.permute(2, 0, 1)
    c = x.shape[0]
    blurred = _blur_torch(torch.cat([x, y, x * x, y * y, x * y], dim=0))
    mu_x, mu_y, exx, eyy, exy = blurred.split(c, dim=0)
    sxx = exx - mu_x * mu_x
    syy = eyy - mu_y * mu_y
    sxy = exy - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean(dim=0)


def photometric_loss_torch(render: torch.Tensor, gt: torch.Tensor, lam: float) -> torch.Tensor:
    """Mean over pixels of ``(1 - lam) * L1 + lam * clamp(1 - SSIM)``."""
    l1 = (render - gt).abs().mean(dim=2)
    if lam == 0.0:
        return l1.mean()
    dssim = torch.clamp(1.0 - ssim_map_torch(render, gt), 0.0, 1.0)
    return ((1.0 - lam) * l1 + lam * dssim).mean()


def photometric_loss(scene: Scene, cam: Camera, gt: np.ndarray, lam: float = DEFAULT_LAMBDA) -> float:
    """Same loss evaluated through the numpy renderer."""
    return float(residual_values(raster.render(scene, cam).color, gt, lam).mean())


# --------------------------------------------------------------------------
# Optimization
# --------------------------------------------------------------------------


def _check_scene_views(scene: Scene, views) -> None:
    if len(views) == 0:
        raise ValueError("at least one training view is required")
    if len(scene) == 0:
        raise ValueError("scene must contain at least one primitive")


def fit_base_with_history(
    scene_init: Scene, views: Sequence[tuple[Camera, np.ndarray]], cfg: FitConfig
) -> tuple[Scene, FitHistory]:
    _check_scene_views(scene_init, views)
    history = FitHistory()
    if cfg.iterations == 0:
        return scene_init, history
    torch.set_num_threads(cfg.threads)
    params = SceneParams(scene_init)
    gts = [torch.tensor(np.asarray(img, dtype=np.float64), dtype=DTYPE) for _, img in views]
    groups = [
        {"params": [params.mean], "lr": cfg.lr_mean},
        {"params": [params.rotation], "lr": cfg.lr_rotation},
        {"params": [params.log_scale], "lr": cfg.lr_scale},
        {"params": [params.opacity_logit], "lr": cfg.lr_opacity},
        {"params": [params.color_sh], "lr": cfg.lr_color},
    ]
    opt = torch.optim.Adam(groups, eps=1e-15, foreach=True)
    rng = np.random.default_rng(cfg.seed)
    queue: list[int] = []
    decay = math.log(cfg.lr_mean_final / cfg.lr_mean)

    for it in range(cfg.iterations):
        frac = it / max(1, cfg.iterations - 1)
        groups_lr = cfg.lr_mean * math.exp(decay * frac)
        opt.param_groups[0]["lr"] = groups_lr
        batch = []
        for _ in range(cfg.batch):
            if not queue:
                queue = list(rng.permutation(len(views)))
            batch.append(queue.pop())
        opt.zero_grad(set_to_none=True)
        loss = 0.0
        for v in batch:
            cam = views[v][0]
            img = render_torch(params, cam, scene_init.sh_degree_color)
            loss = loss + photometric_loss_torch(img, gts[v], cfg.lam)
        loss = loss / len(batch)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise FitError(f"non-finite photometric loss at iteration {it} (views {batch})")
        loss.backward()
        opt.step()
        params.project_constraints()
        history.losses.append(value)
    return params.to_scene(), history


def fit_base(scene_init: Scene, views: Sequence[tuple[Camera, np.ndarray]], cfg: FitConfig) -> Scene:
    """Optimize geometry, opacity and color; the primitive count never changes."""
    return fit_base_with_history(scene_init, views, cfg)[0]


# --------------------------------------------------------------------------
# Gradient validation
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0


def _perturbed_scene(scene: Scene, group: str, k: int, comp: tuple, delta: float) -> Scene:
    p = scene.primitives[k]
    if group == "mean":
        v = np.array(p.mean)
        v[comp] += delta
        q = p.replace(mean=v)
    elif group == "rotation":
        v = np.array(p.rotation)
        v[comp] += delta
        q = p.replace(rotation=v / np.linalg.norm(v))
    elif group == "log_scale":
        v = np.log(np.array(p.scale))
        v[comp] += delta
        q = p.replace(scale=np.exp(v))
    elif group == "opacity_logit":
        lg = _logit(np.array(p.opacity)) + delta
        q = p.replace(opacity=1.0 / (1.0 + np.exp(-lg)))
    elif group == "color_sh":
        v = np.array(p.color_sh)
        v[comp] += delta
        q = p.replace(color_sh=v)
    elif group == "uncert_sh":
        v = np.array(p.uncert_sh)
        v[comp] += delta
        q = p.replace(uncert_sh=v)
    else:
        raise KeyError(f"unknown parameter group {group!r}")
    prims = list(scene.primitives)
    prims[k] = q
    return Scene(prims, scene.sh_degree_color, scene.sh_degree_uncert, scene.background_color)


def _rel_error(a: float, b: float, floor: float = 1e-10) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_grad_check(
    scene: Scene,
    view: tuple[Camera, np.ndarray],
    param_subset: Sequence[tuple[str, int, tuple]],
    mode: str = "photometric",
    h: float = 1e-5,
    lam: float = DEFAULT_LAMBDA,
    uncert_cfg=None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``param_subset`` lists ``(group, primitive_index, component)`` triples.  In
    ``"photometric"`` mode the loss is the fitter's photometric loss on
    ``view = (camera, ground_truth_image)``.  In ``"uncertainty"`` mode ``view``
    is ``(camera, residual_map)`` and the loss is the regularized uncertainty
    objective; every group other than ``uncert_sh`` is frozen, so its analytic
    gradient is exactly zero by construction.
    """
    cam, target = view
    analytic, numeric = [], []
    if mode == "photometric":
        params = SceneParams(scene)
        gt = torch.tensor(np.asarray(target, dtype=np.float64), dtype=DTYPE)
        loss = photometric_loss_torch(render_torch(params, cam, scene.sh_degree_color), gt, lam)
        loss.backward()
        for group, k, comp in param_subset:
            g = getattr(params, group).grad
            analytic.append(float(g[k][comp]) if g is not None else 0.0)
            lp = photometric_loss(_perturbed_scene(scene, group, k, comp, h), cam, target, lam)
            lm = photometric_loss(_perturbed_scene(scene, group, k, comp, -h), cam, target, lam)
            numeric.append((lp - lm) / (2 * h))
    elif mode == "uncertainty":
        from . import solver

        cfg = uncert_cfg or solver.UncertFitConfig()
        problem = solver.UncertaintyProblem.build(scene, [(cam, target)], cfg)
        grad = problem.gradient(np.array(scene.uncert_coeffs).reshape(-1))
        s = grad.size // len(scene)
        for group, k, comp in param_subset:
            if group != "uncert_sh":
                analytic.append(0.0)
                numeric.append(0.0)
                continue
            i = comp[0] if isinstance(comp, tuple) else int(comp)
            analytic.append(float(grad[k * s + i]))
            fp = solver.rendered_objective(
                _perturbed_scene(scene, group, k, (i,), h), [(cam, target)], cfg
            )
            fm = solver.rendered_objective(
                _perturbed_scene(scene, group, k, (i,), -h), [(cam, target)], cfg
            )
            numeric.append((fp - fm) / (2 * h))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    analytic, numeric = np.array(analytic), np.array(numeric)
    rel = np.array([_rel_error(a, b) for a, b in zip(analytic, numeric)])
    return GradCheckReport(analytic, numeric, rel)
