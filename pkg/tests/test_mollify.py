import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jumpfilter.grid import GridDensity, gaussian_density
from jumpfilter.mollify import (IDENTITY, DiffOperator, GaussianKernel, JumpOperator, PointMeasure,
                                adjoint_mollify, check_kernel_identities, mollify, rho_constant, rho_eps,
                                rho_eps_gradient, rho_eps_quadrature, semigroup_error)
from jumpfilter.stencils import diff1

from conftest import pairing


@pytest.fixture(scope="module")
def wide_grid():
    return GridDensity.on_box(12.0, 0.02)


def gauss(var, mean=0.0):
    return lambda x: gaussian_density(x, var, mean)


def test_kernel_unit_mass_and_symmetry():
    k = GaussianKernel(0.3)
    x = np.linspace(-6, 6, 6001)[:, None]
    assert np.sum(k(x)) * 0.002 == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_array_equal(k(x), k(-x))
    assert np.sum(k.discrete(0.05)) * 0.05 == pytest.approx(1.0, abs=1e-14)


def test_kernel_derivative_matches_difference():
    k = GaussianKernel(0.2)
    x = np.linspace(-2, 2, 81)[:, None]
    h = 1e-5
    fd = (k(x + h) - k(x - h)) / (2 * h)
    np.testing.assert_allclose(k.derivative(x, 1), fd, atol=1e-8)
    fd2 = (k(x + h) - 2 * k(x) + k(x - h)) / h ** 2
    np.testing.assert_allclose(k.derivative(x, 2), fd2, atol=1e-4)


def test_point_mass_gives_kernel(wide_grid):
    out = mollify(PointMeasure(np.zeros((1, 1)), [1.0]), 0.1, grid=wide_grid)
    np.testing.assert_allclose(out.values, GaussianKernel(0.1)(wide_grid.points()), atol=1e-15)


@pytest.mark.parametrize("s,eps", [(1.0, 0.1), (0.5, 0.02), (0.3, 0.5)])
def test_gaussian_convolution_identity(wide_grid, s, eps):
    u = GridDensity.on_box(8.0, 0.02, fn=gauss(s))
    out = mollify(u, eps, grid=wide_grid)
    expected = gaussian_density(wide_grid.points(), s + eps)
    assert np.max(np.abs(out.values - expected)) <= 1e-8


def test_mollified_derivative_order(wide_grid):
    u = GridDensity.on_box(8.0, 0.02, fn=gauss(0.5))
    out = mollify(u, 0.1, grid=wide_grid, order=1)
    x = wide_grid.points()[..., 0]
    expected = -x / 0.6 * gaussian_density(wide_grid.points(), 0.6)
    assert np.max(np.abs(out.values - expected)) <= 1e-8


def test_coverage_enforced():
    u = GridDensity.on_box(3.0, 0.02, fn=gauss(0.2))
    with pytest.raises(ValueError, match="does not cover"):
        mollify(u, 0.5)


def test_point_measure_needs_grid():
    with pytest.raises(ValueError):
        mollify(PointMeasure(np.zeros((1, 1)), [1.0]), 0.1)


def test_lp_norm_decreases_with_eps(std_normal_grid):
    norms = []
    for eps in (0.004, 0.02, 0.1, 0.5):
        out = GridDensity.on_box(16.0, 0.01)
        norms.append(mollify(std_normal_grid, eps, grid=out).lp_norm(4))
    assert all(a >= b for a, b in zip(norms, norms[1:]))
    assert norms[0] <= std_normal_grid.lp_norm(4)


# property-based checks of contraction and duality ---------------------


@st.composite
def bumps(draw):
    """Random smooth compactly supported function on the grid [-6, 6], h = 0.02."""
    n = draw(st.integers(1, 3))
    centres = draw(st.lists(st.floats(-2.5, 2.5), min_size=n, max_size=n))
    widths = draw(st.lists(st.floats(0.3, 1.5), min_size=n, max_size=n))
    amps = draw(st.lists(st.floats(-2.0, 2.0), min_size=n, max_size=n))

    def fn(x):
        s = x[..., 0]
        total = np.zeros_like(s)
        for c, w, a in zip(centres, widths, amps):
            r = (s - c) / w
            inside = np.abs(r) < 1
            total[inside] += a * np.exp(-1.0 / (1.0 - r[inside] ** 2))
        return total

    return GridDensity.on_box(6.0, 0.02, fn=fn)


@given(u=bumps(), eps=st.sampled_from([0.01, 0.05, 0.2]), p=st.sampled_from([2, 4]))
def test_contraction(u, eps, p):
    out = GridDensity.on_box(10.0, 0.02)
    assert mollify(u, eps, grid=out).lp_norm(p) <= u.lp_norm(p) * (1 + 1e-12) + 1e-300


@given(u=bumps(), phi=bumps(), eps=st.sampled_from([0.01, 0.05]))
def test_duality(u, phi, eps):
    out = GridDensity.on_box(6.0, 0.02)
    lhs = pairing(out, mollify(u, eps, grid=out).values, phi.values)
    rhs = pairing(out, u.values, mollify(phi, eps, grid=out).values)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-14)


# adjoint mollification ------------------------------------------------


def test_identity_adjoint_is_mollify():
    u = GridDensity.on_box(4.0, 0.05, fn=gauss(0.4))
    out = GridDensity.on_box(8.0, 0.05)
    a = adjoint_mollify(IDENTITY, u, 0.1, grid=out).values
    b = mollify(u, 0.1, grid=out).values
    assert np.max(np.abs(a - b)) <= 1e-12


def test_first_order_adjoint_is_minus_derivative():
    u = GridDensity.on_box(4.0, 0.02, fn=gauss(0.3))
    out = GridDensity.on_box(8.0, 0.02)
    op = DiffOperator(b=lambda y: np.ones_like(y))
    got = adjoint_mollify(op, u, 0.1, grid=out).values
    moll = mollify(u, 0.1, grid=out).values
    # numerical integration by parts of the mollified density
    assert np.max(np.abs(got + diff1(moll, 0, out.h))[2:-2]) <= 1e-3
    exact = -mollify(u, 0.1, grid=out, order=1).values
    assert np.max(np.abs(got - exact)) <= 1e-6


@pytest.mark.parametrize("a", [0.5, 2.0])
def test_constant_second_order_adjoint(a):
    s, eps = 0.4, 0.1
    u = GridDensity.on_box(5.0, 0.02, fn=gauss(s))
    out = GridDensity.on_box(8.0, 0.02)
    op = DiffOperator(a=lambda y: np.full(y.shape[:-1] + (1, 1), a))
    got = adjoint_mollify(op, u, eps, grid=out).values
    x = out.points()[..., 0]
    v = s + eps
    expected = a * (x ** 2 / v ** 2 - 1 / v) * gaussian_density(out.points(), v)
    assert np.max(np.abs(got - expected)) <= 1e-6


def test_jump_operator_kinds():
    u = GridDensity.on_box(3.0, 0.05, fn=gauss(0.3))
    out = GridDensity.on_box(8.0, 0.05)
    shift = lambda y: np.full_like(y, 0.5)  # noqa: E731
    t = adjoint_mollify(JumpOperator("T", shift), u, 0.1, grid=out).values
    i = adjoint_mollify(JumpOperator("I", shift), u, 0.1, grid=out).values
    base = mollify(u, 0.1, grid=out).values
    np.testing.assert_allclose(i, t - base, atol=1e-14)
    # a constant shift moves every node mass rigidly
    shifted = GridDensity(u.values, u.lower + 0.5, u.h)
    np.testing.assert_allclose(t, adjoint_mollify(IDENTITY, shifted, 0.1, grid=out).values, atol=1e-14)
    j = adjoint_mollify(JumpOperator("J", shift), u, 0.1, grid=out).values
    np.testing.assert_allclose(j, i + 0.5 * adjoint_mollify(IDENTITY, u, 0.1, grid=out, order=1).values,
                               atol=1e-13)
    with pytest.raises(ValueError):
        JumpOperator("K", shift)


def test_unsupported_descriptor():
    u = GridDensity.on_box(1.0, 0.1, fn=gauss(0.1))
    with pytest.raises(TypeError):
        adjoint_mollify("laplacian", u, 0.1, grid=GridDensity.on_box(4.0, 0.1))


# p-fold kernel ----------------------------------------------------------


@pytest.mark.parametrize("p", [2, 3, 4, 6])
def test_rho_equal_points(p):
    assert rho_eps(np.full(p, 0.37), 0.2, p) == pytest.approx(rho_constant(0.2, p), rel=1e-15)


def test_rho_p2_closed_form():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(50, 2))
    eps = 0.3
    expected = np.exp(-(y[:, 0] - y[:, 1]) ** 2 / (4 * eps)) / math.sqrt(4 * math.pi * eps)
    np.testing.assert_allclose(rho_eps(y, eps, 2), expected, rtol=1e-13)
    np.testing.assert_allclose(rho_eps_quadrature(y, eps), expected, rtol=1e-6)


@pytest.mark.parametrize("p", [2, 3, 4])
def test_rho_matches_quadrature(p):
    y = np.random.default_rng(p).normal(scale=0.6, size=(100, p))
    np.testing.assert_allclose(rho_eps(y, 0.1, p), rho_eps_quadrature(y, 0.1), rtol=1e-6)


@given(y=st.lists(st.floats(-2, 2), min_size=3, max_size=3), eps=st.floats(0.05, 1.0))
def test_rho_gradient_sums_to_zero(y, eps):
    g = rho_eps_gradient(np.array(y), eps, 3)
    assert abs(g.sum()) <= 1e-10 * rho_constant(eps, 3) / eps


def test_rho_gradient_by_differences():
    y = np.array([0.1, -0.4, 0.7])
    h = 1e-6
    g = rho_eps_gradient(y, 0.2, 3)[:, 0]
    for r in range(3):
        e = np.zeros(3)
        e[r] = h
        fd = (rho_eps(y + e, 0.2, 3) - rho_eps(y - e, 0.2, 3)) / (2 * h)
        assert fd == pytest.approx(g[r], rel=1e-7)


def test_semigroup_identity():
    x = np.linspace(-2, 2, 41)
    assert semigroup_error(0.1, 0.1, x, x[::-1]) <= 1e-8


def test_kernel_identity_report():
    rep = check_kernel_identities(0.1, 0.1, 2, 1)
    assert rep.semigroup_error <= 1e-8
    assert rep.rho_rel_error <= 1e-6
    assert rep.zero_sum_error <= 1e-10
    assert rep.partial_rho_error <= 1e-8
    assert "moment_constant" in rep.to_text()


def test_moment_constant_stable_across_eps():
    n = [check_kernel_identities(e, e, 2, 1, n_samples=2000).moment_constant for e in (0.5, 0.05)]
    assert all(np.isfinite(n))
    assert n[0] == pytest.approx(n[1], rel=0.5)


def test_kernel_identity_argument_checks():
    with pytest.raises(ValueError):
        check_kernel_identities(0.1, 0.1, 2, 3)
    with pytest.raises(ValueError):
        check_kernel_identities(0.1, 0.1, 1, 1)
