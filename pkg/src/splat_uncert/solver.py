"""Post-hoc fitting of per-primitive SH uncertainty coefficients.

The rendered raw uncertainty of every training pixel is linear in the stacked
coefficient vector ``u`` (length ``s*K``): ``U = A u``, with ``A`` built from the
frozen scene's blend weights and SH basis values.  The objective is

    sum_x (y_x - U_x)^2 + lambda_reg * sum_k int_{S^2} (b - u_k(r))^2 dr

where ``y`` are the residual maps (minus ``b_bg * T_remaining`` when the
background prior is active).  Two solvers are provided: Adam over one view per
step (:func:`fit_uncertainty_sgd`) and the exact ridge solution of the normal
equations (:func:`solve_direct`).  The SGD path evaluates the prior with a
Gauss-Legendre sphere quadrature; the direct path uses its closed form under
orthonormal SH, so either one checks the other.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .raster import RenderOptions, render, render_with_weights
from .scene import Camera, Scene
from .sh import SH_C0, sh_basis_size, sh_evaluate

log = logging.getLogger(__name__)

DIRECT_SOLVE_CAP = 20_000
SQRT_4PI = math.sqrt(4.0 * math.pi)


class SolverError(RuntimeError):
    pass


@dataclass
class UncertFitConfig:
    iterations: int = 400
    learning_rate: float = 0.01
    lambda_reg: float = 0.0
    prior_level: float = 1.0
    quadrature_degree: int | None = None  # defaults to the scene's uncertainty SH degree
    background_prior: bool | None = None  # None: on exactly when lambda_reg > 0
    seed: int = 0
    cosine_decay: bool = True
    direct_cap: int = DIRECT_SOLVE_CAP

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.prior_level < 0:
            raise ValueError("prior_level must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    @property
    def background_uncertainty(self) -> float:
        on = self.lambda_reg > 0 if self.background_prior is None else self.background_prior
        return self.prior_level if on else 0.0


# --------------------------------------------------------------------------
# Sphere quadrature and the prior term
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SphereQuadrature:
    directions: np.ndarray  # (Q, 3)
    weights: np.ndarray  # (Q,)
    degree: int  # SH degree L whose pairwise products are integrated exactly

    @property
    def nodes(self) -> list[tuple[np.ndarray, float]]:
        return list(zip(self.directions, self.weights))

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate samples over the sphere; the node axis is the last one."""
        return values @ self.weights


def gauss_legendre_sphere(degree: int) -> SphereQuadrature:
    """``(L+1)`` Gauss-Legendre nodes in cos(theta) times ``(2L+2)`` even azimuths.

    Exact for polynomials of degree ``2L`` on the sphere, i.e. for every product
    ``Y_i * Y_j`` with both indices up to degree ``L``.
    """
    if degree < 0:
        raise ValueError("degree must be >= 0")
    n_theta = degree + 1
    n_phi = 2 * degree + 2
    ct, wt = np.polynomial.legendre.leggauss(n_theta)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    st = np.sqrt(1.0 - ct**2)
    dirs = np.stack(
        [
            (st[:, None] * np.cos(phi)[None, :]).reshape(-1),
            (st[:, None] * np.sin(phi)[None, :]).reshape(-1),
            np.repeat(ct, n_phi),
        ],
        axis=1,
    )
    weights = np.repeat(wt, n_phi) * (2.0 * np.pi / n_phi)
    return SphereQuadrature(dirs, weights, degree)


def prior_vector(n_primitives: int, sh_degree: int, prior_level: float) -> np.ndarray:
    """Coefficients of the constant function ``b`` for every primitive."""
    s = sh_basis_size(sh_degree)
    u = np.zeros((n_primitives, s))
    u[:, 0] = prior_level * SQRT_4PI
    return u.reshape(-1)


def regularizer_loss(coeffs: np.ndarray, b: float, quad: SphereQuadrature) -> tuple[float, np.ndarray]:
    """Quadrature value of ``sum_k int (b - u_k)^2`` and its coefficient gradient.

    ``coeffs`` has shape ``(K, s)``; the gradient has the same shape.
    """
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    s = coeffs.shape[1]
    degree = math.isqrt(s) - 1
    if quad.degree < degree:
        raise ValueError(f"quadrature of degree {quad.degree} cannot integrate SH degree {degree}")
    basis = sh_evaluate(degree, quad.directions)  # (Q, s)
    diff = b - coeffs @ basis.T  # (K, Q)
    loss = float(np.sum(diff * diff * quad.weights[None, :]))
    grad = -2.0 * (diff * quad.weights[None, :]) @ basis
    return loss, grad


def parseval_regularizer(coeffs: np.ndarray, b: float) -> float:
    """Closed form of the prior term for orthonormal SH."""
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    dc = coeffs[:, 0] - b * SQRT_4PI
    return float(np.sum(dc * dc) + np.sum(coeffs[:, 1:] ** 2))


# --------------------------------------------------------------------------
# The linear system
# --------------------------------------------------------------------------


@dataclass
class ViewSystem:
    matrix: sp.csr_matrix  # (pixels, s*K)
    target: np.ndarray  # residual minus background term


@dataclass
class UncertaintyProblem:
    """Per-view sparse systems plus everything needed to evaluate the objective."""

    views: list[ViewSystem]
    n_primitives: int
    sh_degree: int
    lambda_reg: float
    prior_level: float
    quad: SphereQuadrature

    @classmethod
    def build(
        cls, scene: Scene, views: Sequence[tuple[Camera, np.ndarray]], cfg: UncertFitConfig
    ) -> "UncertaintyProblem":
        opts = RenderOptions(background_uncertainty=cfg.background_uncertainty)
        systems = []
        for cam, residual in views:
            y = np.asarray(getattr(residual, "values", residual), dtype=np.float64)
            if y.shape != cam.shape:
                raise ValueError(f"residual map {y.shape} does not match camera {cam.shape}")
            _, bw = render_with_weights(scene, cam, opts)
            target = y.reshape(-1) - opts.background_uncertainty * bw.final_transmittance
            systems.append(ViewSystem(bw.system_matrix(scene.sh_degree_uncert), target))
        qdeg = scene.sh_degree_uncert if cfg.quadrature_degree is None else cfg.quadrature_degree
        return cls(
            systems,
            len(scene),
            scene.sh_degree_uncert,
            cfg.lambda_reg,
            cfg.prior_level,
            gauss_legendre_sphere(qdeg),
        )

    @property
    def n_coeffs(self) -> int:
        return self.n_primitives * sh_basis_size(self.sh_degree)

    def data_term(self, u: np.ndarray) -> float:
        return float(sum(np.sum((v.target - v.matrix @ u) ** 2) for v in self.views))

    def reg_term(self, u: np.ndarray) -> float:
        if self.lambda_reg == 0.0:
            return 0.0
        return regularizer_loss(self._shaped(u), self.prior_level, self.quad)[0]

    def objective(self, u: np.ndarray) -> float:
        return self.data_term(u) + self.lambda_reg * self.reg_term(u)

    def _shaped(self, u: np.ndarray) -> np.ndarray:
        return u.reshape(self.n_primitives, sh_basis_size(self.sh_degree))

    def view_gradient(self, u: np.ndarray, index: int, reg_share: float) -> np.ndarray:
        v = self.views[index]
        grad = 2.0 * (v.matrix.T @ (v.matrix @ u - v.target))
        if self.lambda_reg > 0.0 and reg_share > 0.0:
            _, g = regularizer_loss(self._shaped(u), self.prior_level, self.quad)
            grad = grad + self.lambda_reg * reg_share * g.reshape(-1)
        return grad

    def gradient(self, u: np.ndarray) -> np.ndarray:
        grad = sum(self.view_gradient(u, i, 0.0) for i in range(len(self.views)))
        if self.lambda_reg > 0.0:
            _, g = regularizer_loss(self._shaped(u), self.prior_level, self.quad)
            grad = grad + self.lambda_reg * g.reshape(-1)
        return np.asarray(grad)


def rendered_objective(
    scene: Scene, views: Sequence[tuple[Camera, np.ndarray]], cfg: UncertFitConfig
) -> float:
    """Objective evaluated by rendering the uncertainty maps directly (no matrix)."""
    opts = RenderOptions(background_uncertainty=cfg.background_uncertainty)
    total = 0.0
    for cam, residual in views:
        y = np.asarray(getattr(residual, "values", residual), dtype=np.float64)
        u = render(scene, cam, opts).uncertainty_raw
        total += float(np.sum((y - u) ** 2))
    if cfg.lambda_reg > 0.0:
        qdeg = scene.sh_degree_uncert if cfg.quadrature_degree is None else cfg.quadrature_degree
        reg, _ = regularizer_loss(scene.uncert_coeffs, cfg.prior_level, gauss_legendre_sphere(qdeg))
        total += cfg.lambda_reg * reg
    return total


# --------------------------------------------------------------------------
# SGD path
# --------------------------------------------------------------------------


@dataclass
class FitDiagnostics:
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["iteration", "objective", "data", "reg"])
            writer.writeheader()
            writer.writerows(self.rows)


def fit_uncertainty_sgd(
    scene: Scene,
    views: Sequence[tuple[Camera, np.ndarray]],
    cfg: UncertFitConfig,
    diagnostics: FitDiagnostics | None = None,
    log_every: int = 0,
    problem: UncertaintyProblem | None = None,
) -> Scene:
    """Fit ``uncert_sh`` with Adam, one training view per step.

    Geometry, opacity and color are left untouched; the returned scene differs
    from the input only in its uncertainty coefficients, which start from the
    input scene's values.
    """
    if len(views) == 0:
        raise ValueError("at least one training view is required")
    problem = problem or UncertaintyProblem.build(scene, views, cfg)
    u = np.array(scene.uncert_coeffs, dtype=np.float64).reshape(-1)
    n_views = len(problem.views)
    m = np.zeros_like(u)
    v = np.zeros_like(u)
    beta1, beta2, eps = 0.9, 0.999, 1e-15
    rng = np.random.default_rng(cfg.seed)
    queue: list[int] = []

    def record(it):
        if diagnostics is not None and (log_every and it % log_every == 0 or it == cfg.iterations):
            data, reg = problem.data_term(u), problem.reg_term(u)
            obj = data + cfg.lambda_reg * reg
            if not math.isfinite(obj):
                raise SolverError(f"non-finite objective at iteration {it}")
            diagnostics.rows.append({"iteration": it, "objective": obj, "data": data, "reg": reg})

    record(0)
    for it in range(cfg.iterations):
        if not queue:
            queue = list(rng.permutation(n_views))
        view = queue.pop()
        # Each step carries an equal share of the prior so one epoch sums to
        # the full gradient.
        g = problem.view_gradient(u, view, 1.0 / n_views)
        if not np.all(np.isfinite(g)):
            raise SolverError(f"non-finite gradient at iteration {it}")
        lr = cfg.learning_rate
        if cfg.cosine_decay:
            lr *= 0.5 * (1.0 + math.cos(math.pi * it / cfg.iterations))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** (it + 1))
        vhat = v / (1 - beta2 ** (it + 1))
        u = u - lr * mhat / (np.sqrt(vhat) + eps)
        record(it + 1)
    final = problem.objective(u)
    if not math.isfinite(final):
        raise SolverError("non-finite objective after fitting")
    return scene.with_uncertainty(u.reshape(len(scene), -1))


# --------------------------------------------------------------------------
# Direct path
# --------------------------------------------------------------------------


@dataclass
class NormalEquations:
    gram: sp.csr_matrix  # A^T A
    rhs: np.ndarray  # A^T y
    pixel_count: int
    target_sq: float  # y^T y
    n_primitives: int
    sh_degree: int

    def data_term(self, u: np.ndarray) -> float:
        return float(self.target_sq - 2.0 * u @ self.rhs + u @ (self.gram @ u))


def assemble_normal_equations(
    scene: Scene,
    views: Sequence[tuple[Camera, np.ndarray]],
    cfg: UncertFitConfig,
) -> NormalEquations:
    s = sh_basis_size(scene.sh_degree_uncert)
    n_cols = s * len(scene)
    if n_cols > cfg.direct_cap:
        raise SolverError(
            f"system has {n_cols} columns, above the direct-solve cap of {cfg.direct_cap}; "
            "use fit_uncertainty_sgd instead"
        )
    opts = RenderOptions(background_uncertainty=cfg.background_uncertainty)
    gram = sp.csr_matrix((n_cols, n_cols))
    rhs = np.zeros(n_cols)
    target_sq = 0.0
    pixels = 0
    for cam, residual in views:
        y = np.asarray(getattr(residual, "values", residual), dtype=np.float64).reshape(-1)
        _, bw = render_with_weights(scene, cam, opts)
        y = y - opts.background_uncertainty * bw.final_transmittance
        a = bw.system_matrix(scene.sh_degree_uncert)
        gram = gram + (a.T @ a).tocsr()
        rhs += a.T @ y
        target_sq += float(y @ y)
        pixels += y.size
    return NormalEquations(gram.tocsr(), rhs, pixels, target_sq, len(scene), scene.sh_degree_uncert)


@dataclass
class DirectSolution:
    coeffs: np.ndarray  # flat, length s*K
    objective: float
    data_term: float
    reg_term: float
    rank: int | None = None


def solve_direct(ne: NormalEquations, cfg: UncertFitConfig) -> DirectSolution:
    """Exact minimizer of ``||y - A u||^2 + lambda_reg ||u - u_prior||^2``.

    Under orthonormal SH the prior integral equals the squared coefficient
    distance to ``u_prior`` (``b * sqrt(4 pi)`` in every DC slot).  With
    ``lambda_reg == 0`` the system may be singular; the minimum-norm solution
    is returned together with the numerical rank.
    """
    n = ne.rhs.size
    u_prior = prior_vector(ne.n_primitives, ne.sh_degree, cfg.prior_level)
    lam = cfg.lambda_reg
    rank = None
    if lam > 0.0:
        system = (ne.gram + lam * sp.identity(n, format="csr")).tocsc()
        u = spla.spsolve(system, ne.rhs + lam * u_prior)
    else:
        dense = ne.gram.toarray()
        u, _, rank, _ = scipy.linalg.lstsq(dense, ne.rhs, lapack_driver="gelsd")
        if rank < n:
            log.info("normal equations rank-deficient: rank %d of %d", rank, n)
    u = np.asarray(u, dtype=np.float64)
    data = ne.data_term(u)
    reg = parseval_regularizer(u.reshape(ne.n_primitives, -1), cfg.prior_level)
    return DirectSolution(u, data + lam * reg, data, reg, rank)


def fit_uncertainty_direct(
    scene: Scene, views: Sequence[tuple[Camera, np.ndarray]], cfg: UncertFitConfig
) -> Scene:
    sol = solve_direct(assemble_normal_equations(scene, views, cfg), cfg)
    return scene.with_uncertainty(sol.coeffs.reshape(len(scene), -1))


def dc_for_value(value: float) -> float:
    """DC coefficient whose SH expansion is the constant ``value``."""
    return value / SH_C0
