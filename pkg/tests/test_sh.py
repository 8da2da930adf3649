import math

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.special import sph_harm_y

from splat_uncert.scene import Primitive, evaluate_uncertainty
from splat_uncert.sh import (
    SH_C0,
    degree_from_size,
    monomial_exponents,
    monomial_to_sh,
    sh_basis_size,
    sh_dot,
    sh_evaluate,
)
from splat_uncert.solver import gauss_legendre_sphere


def closed_form(d):
    """Textbook real SH up to degree 3 (no Condon-Shortley phase)."""
    x, y, z = d
    pi = math.pi
    return np.array(
        [
            0.5 / math.sqrt(pi),
            math.sqrt(3 / (4 * pi)) * y,
            math.sqrt(3 / (4 * pi)) * z,
            math.sqrt(3 / (4 * pi)) * x,
            0.5 * math.sqrt(15 / pi) * x * y,
            0.5 * math.sqrt(15 / pi) * y * z,
            0.25 * math.sqrt(5 / pi) * (3 * z * z - 1),
            0.5 * math.sqrt(15 / pi) * x * z,
            0.25 * math.sqrt(15 / pi) * (x * x - y * y),
            0.25 * math.sqrt(35 / (2 * pi)) * y * (3 * x * x - y * y),
            0.5 * math.sqrt(105 / pi) * x * y * z,
            0.25 * math.sqrt(21 / (2 * pi)) * y * (5 * z * z - 1),
            0.25 * math.sqrt(7 / pi) * z * (5 * z * z - 3),
            0.25 * math.sqrt(21 / (2 * pi)) * x * (5 * z * z - 1),
            0.25 * math.sqrt(105 / pi) * z * (x * x - y * y),
            0.25 * math.sqrt(35 / (2 * pi)) * x * (x * x - 3 * y * y),
        ]
    )


def scipy_real_sh(degree, d):
    """Real SH built from scipy's complex harmonics, undoing its phase factor."""
    x, y, z = d
    theta = math.atan2(math.hypot(x, y), z)  # acos(z) loses the polar angle near the poles
    phi = math.atan2(y, x)
    out = []
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            ylm = sph_harm_y(l, abs(m), theta, phi)
            sign = (-1) ** m
            if m > 0:
                out.append(math.sqrt(2) * sign * ylm.real)
            elif m < 0:
                out.append(math.sqrt(2) * sign * ylm.imag)
            else:
                out.append(ylm.real)
    return np.array(out)


unit_vectors = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3).filter(
    lambda v: np.linalg.norm(v) > 0.1
).map(lambda v: np.asarray(v) / np.linalg.norm(v))


@pytest.mark.parametrize("degree,size", [(0, 1), (1, 4), (2, 9), (3, 16), (5, 36)])
def test_basis_size(degree, size):
    assert sh_basis_size(degree) == size
    assert degree_from_size(size) == degree


def test_basis_size_rejects_negative():
    with pytest.raises(ValueError):
        sh_basis_size(-1)
    with pytest.raises(ValueError):
        degree_from_size(5)


def test_dc_value():
    for d in ([1, 0, 0], [0, 0, -1], [0.6, 0.0, 0.8]):
        assert_allclose(sh_evaluate(0, d), [0.2820948], atol=1e-7)
    assert SH_C0 == pytest.approx(1 / (2 * math.sqrt(math.pi)), abs=1e-16)


def test_y10_on_z_axis():
    assert sh_evaluate(1, [0, 0, 1])[2] == pytest.approx(0.4886025, abs=1e-7)


@given(unit_vectors)
def test_matches_closed_forms(d):
    assert_allclose(sh_evaluate(3, d), closed_form(d), atol=1e-12)


@given(unit_vectors)
@example(np.array([0.0, 1e-10, 1.0]))
def test_matches_scipy_up_to_degree_5(d):
    assert_allclose(sh_evaluate(5, d), scipy_real_sh(5, d), atol=1e-11)


def test_sum_of_squares_addition_theorem(rng):
    # sum_m Y_lm(d)^2 = (2l+1)/(4 pi) for every l
    d = rng.normal(size=(50, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    y = sh_evaluate(3, d)
    for l in range(4):
        band = y[:, l * l : (l + 1) ** 2]
        assert_allclose((band**2).sum(axis=1), (2 * l + 1) / (4 * math.pi), atol=1e-12)


def test_batch_shapes(rng):
    d = rng.normal(size=(4, 5, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    assert sh_evaluate(2, d).shape == (4, 5, 9)
    assert sh_evaluate(2, d[0, 0]).shape == (9,)


def test_direction_renormalized_within_tolerance():
    d = np.array([0.0, 0.0, 1.0005])
    assert_allclose(sh_evaluate(1, d), sh_evaluate(1, [0, 0, 1]), atol=1e-15)


def test_direction_rejected_beyond_tolerance():
    with pytest.raises(ValueError):
        sh_evaluate(1, [0.0, 0.0, 1.01])
    with pytest.raises(ValueError):
        sh_evaluate(1, [0.0, 0.0, 0.0])


@pytest.mark.parametrize("degree", [0, 1, 2, 3, 4])
def test_orthonormal_under_quadrature(degree):
    q = gauss_legendre_sphere(degree)
    y = sh_evaluate(degree, q.directions)
    gram = (y * q.weights[:, None]).T @ y
    assert_allclose(gram, np.eye(sh_basis_size(degree)), atol=1e-8)


def test_monomial_representation_exact(rng):
    d = rng.normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    for degree in range(4):
        exps = np.array(monomial_exponents(degree))
        mono = np.prod(d[:, None, :] ** exps[None], axis=2)
        assert_allclose(mono @ monomial_to_sh(degree), sh_evaluate(degree, d), atol=1e-12)


def test_sh_dot_matches_einsum(rng):
    b = rng.normal(size=(7, 16))
    c = rng.normal(size=(7, 16))
    assert_allclose(sh_dot(b, c), np.einsum("ki,ki->k", b, c), rtol=1e-13)


def _prim(coeffs):
    return Primitive((0, 0, 0), (1, 0, 0, 0), (1, 1, 1), 0.5, np.zeros((3, 1)), coeffs)


def test_evaluate_uncertainty_dc_and_zero(rng):
    c = np.zeros(16)
    c[0] = 2.0
    for _ in range(5):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        assert evaluate_uncertainty(_prim(c), d) == pytest.approx(2.0 * 0.2820948, abs=1e-7)
        assert evaluate_uncertainty(_prim(np.zeros(16)), d) == 0.0


@given(unit_vectors, st.integers(0, 2**31 - 1))
def test_evaluate_uncertainty_matches_closed_form(d, seed):
    c = np.random.default_rng(seed).normal(size=16)
    assert evaluate_uncertainty(_prim(c), d) == pytest.approx(float(c @ closed_form(d)), abs=1e-12)


@given(unit_vectors, st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_evaluate_uncertainty_linear(d, a, b, seed):
    r = np.random.default_rng(seed)
    c1, c2 = r.normal(size=16), r.normal(size=16)
    lhs = evaluate_uncertainty(_prim(a * c1 + b * c2), d)
    rhs = a * evaluate_uncertainty(_prim(c1), d) + b * evaluate_uncertainty(_prim(c2), d)
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_evaluate_uncertainty_degree_mismatch():
    with pytest.raises(ValueError):
        evaluate_uncertainty(_prim(np.zeros(9)), [0, 0, 1], degree=3)
