"""Real orthonormal spherical harmonics.

Basis functions are ordered by degree ``l`` and then order ``m = -l..l``, so the
flat index of ``(l, m)`` is ``l*l + l + m``.  No Condon-Shortley phase is used.
Evaluation goes through the associated Legendre recurrence in Cartesian form,
so any degree is supported and no trigonometric functions are needed.
"""

from __future__ import annotations

import math

import numpy as np

SH_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))

_UNIT_TOL = 1e-6
_RENORM_TOL = 1e-3


def sh_basis_size(degree: int) -> int:
    if degree < 0:
        raise ValueError(f"SH degree must be >= 0, got {degree}")
    return (degree + 1) ** 2


def degree_from_size(size: int) -> int:
    degree = math.isqrt(size) - 1
    if degree < 0 or (degree + 1) ** 2 != size:
        raise ValueError(f"{size} is not a valid SH coefficient count")
    return degree


def _check_directions(dirs: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(dirs, axis=-1)
    dev = np.abs(norms - 1.0)
    if np.any(dev > _RENORM_TOL):
        raise ValueError("direction is not unit length (|d| deviates by more than 1e-3)")
    if np.any(dev > _UNIT_TOL):
        dirs = dirs / norms[..., None]
    return dirs


def _normalization(l: int, m: int) -> float:
    return math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))


def sh_evaluate(degree: int, dirs) -> np.ndarray:
    """Evaluate all ``(degree+1)**2`` basis functions at one or many directions.

    ``dirs`` has shape ``(3,)`` or ``(..., 3)``; the result has the same leading
    shape with a trailing axis of basis values.  Directions within 1e-3 of unit
    length are renormalized, anything further off raises ``ValueError``.
    """
    sh_basis_size(degree)
    dirs = _check_directions(np.asarray(dirs, dtype=np.float64))
    cols = sh_columns(degree, dirs[..., 0], dirs[..., 1], dirs[..., 2])
    return np.stack(cols, axis=-1)


def sh_columns(degree: int, x, y, z) -> list:
    """Basis values as a list of arrays, one per flat index.

    Only arithmetic operators are used, so ``x, y, z`` may be numpy arrays or
    torch tensors.
    """
    # Re/Im of (x + iy)^m, i.e. sin^m(theta) cos(m phi) / sin(m phi).
    cos_m = [x * 0 + 1]
    sin_m = [x * 0]
    for _ in range(degree):
        c, s = cos_m[-1], sin_m[-1]
        cos_m.append(c * x - s * y)
        sin_m.append(c * y + s * x)

    cols: list = [None] * ((degree + 1) ** 2)
    for m in range(degree + 1):
        # q = P_l^m(z) / sin^m(theta), a polynomial in z.
        q_prev = None
        q = z * 0 + float(_double_factorial(2 * m - 1))
        for l in range(m, degree + 1):
            if l == m + 1:
                q_prev, q = q, z * (2 * m + 1) * q
            elif l > m + 1:
                q_prev, q = q, ((2 * l - 1) * z * q - (l + m - 1) * q_prev) / (l - m)
            k = _normalization(l, m)
            base = l * l + l
            if m == 0:
                cols[base] = k * q
            else:
                k2 = math.sqrt(2.0) * k
                cols[base + m] = k2 * q * cos_m[m]
                cols[base - m] = k2 * q * sin_m[m]
    return cols


def _double_factorial(n: int) -> int:
    result = 1
    while n > 1:
        result *= n
        n -= 2
    return result


def sh_dot(basis: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Sum ``basis[..., i] * coeffs[..., i]`` in fixed index order.

    Used wherever two code paths must agree bit for bit on an SH evaluation.
    """
    out = basis[..., 0] * coeffs[..., 0]
    for i in range(1, basis.shape[-1]):
        out = out + basis[..., i] * coeffs[..., i]
    return out


def monomial_exponents(degree: int) -> list[tuple[int, int, int]]:
    return [
        (a, b, n - a - b) for n in range(degree + 1) for a in range(n, -1, -1) for b in range(n - a, -1, -1)
    ]


def monomial_to_sh(degree: int) -> np.ndarray:
    """Matrix ``M`` with ``Y(d) = monomials(d) @ M`` for unit ``d``.

    Every real SH of degree ``l`` is a homogeneous polynomial of degree ``l`` in
    ``(x, y, z)``, so the representation is exact; it is recovered here by a
    least-squares fit on a fixed point set and only valid on the unit sphere.
    """
    exps = monomial_exponents(degree)
    pts = np.random.default_rng(0).normal(size=(8 * len(exps) + 64, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    mono = np.stack([pts[:, 0] ** a * pts[:, 1] ** b * pts[:, 2] ** c for a, b, c in exps], axis=1)
    m, *_ = np.linalg.lstsq(mono, sh_evaluate(degree, pts), rcond=None)
    return m
