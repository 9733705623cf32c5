import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jumpfilter.grid import GridDensity, gaussian_density
from jumpfilter.stencils import diff1, diff2, wmp_norm


def test_on_box_node_layout():
    g = GridDensity.on_box(2.0, 0.5)
    np.testing.assert_allclose(g.axes()[0], [-2, -1.5, -1, -0.5, 0, 0.5, 1, 1.5, 2])
    assert g.points().shape == (9, 1)
    np.testing.assert_allclose(g.upper, [2.0])


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        GridDensity(np.zeros(5), [0.0, 0.0], 0.1)
    with pytest.raises(ValueError):
        GridDensity(np.zeros(5), [0.0], -0.1)


def test_gaussian_moments(std_normal_grid):
    g = std_normal_grid
    assert g.integral() == pytest.approx(1.0, abs=1e-10)
    assert g.mean()[0] == pytest.approx(0.0, abs=1e-12)
    assert g.covariance()[0, 0] == pytest.approx(1.0, abs=1e-8)


def test_two_dimensional_covariance():
    g = GridDensity.on_box(8.0, 0.05, d=2, fn=lambda x: gaussian_density(x, [1.0, 0.25]))
    np.testing.assert_allclose(g.covariance(), np.diag([1.0, 0.25]), atol=1e-6)


def test_binary_roundtrip(tmp_path, std_normal_grid):
    g = std_normal_grid.like(std_normal_grid.values, t=0.7)
    path = tmp_path / "u.grid"
    g.write_binary(path)
    back = GridDensity.read_binary(path)
    assert back.same_grid(g)
    assert back.t == 0.7
    np.testing.assert_array_equal(back.values, g.values)


def test_binary_magic_checked(tmp_path):
    path = tmp_path / "bad.grid"
    path.write_bytes(b"notagrid" + bytes(64))
    with pytest.raises(ValueError):
        GridDensity.read_binary(path)


def test_interpolation_exact_at_nodes_and_zero_outside(std_normal_grid):
    g = std_normal_grid
    pts = g.points()[::37]
    np.testing.assert_allclose(g.interpolate(pts), g.values[::37], atol=1e-12)
    assert g.interpolate(np.array([[25.0]]))[0] == 0.0


def test_gaussian_l2_norm_squared(std_normal_grid):
    # |N(0,1)|_{L2}^2 = (4 pi)^{-1/2}
    assert wmp_norm(std_normal_grid, 0, 2) ** 2 == pytest.approx(1 / math.sqrt(4 * math.pi), abs=1e-6)


def test_gaussian_h1_norm_squared(std_normal_grid):
    # int |u'|^2 = (1/2) (4 pi)^{-1/2} for the standard normal
    expected = 1.5 / math.sqrt(4 * math.pi)
    assert wmp_norm(std_normal_grid, 1, 2) ** 2 == pytest.approx(expected, rel=1e-4)


def test_wmp_rejects_unresolved_order():
    g = GridDensity.on_box(5.0, 0.1, fn=lambda x: gaussian_density(x, 1.0))
    with pytest.raises(ValueError):
        wmp_norm(g, 3, 2)


@given(c=st.floats(-50, 50).filter(lambda v: abs(v) > 1e-6), m=st.integers(0, 2), p=st.sampled_from([2, 3, 4]))
def test_wmp_homogeneous(std_normal_grid_module, c, m, p):
    g = std_normal_grid_module
    assert wmp_norm(g.like(c * g.values), m, p) == pytest.approx(abs(c) * wmp_norm(g, m, p), rel=1e-12)


@given(m=st.integers(0, 1), p=st.sampled_from([2, 4]))
def test_wmp_monotone_in_order(std_normal_grid_module, m, p):
    g = std_normal_grid_module
    assert wmp_norm(g, m + 1, p) >= wmp_norm(g, m, p)


@pytest.fixture(scope="module")
def std_normal_grid_module():
    return GridDensity.on_box(8.0, 0.02, fn=lambda x: gaussian_density(x, 1.0))


def test_difference_stencils_second_order():
    errs = []
    for h in (0.02, 0.01):
        x = np.arange(-3, 3 + h / 2, h)
        f = np.sin(x)
        e1 = np.max(np.abs(diff1(f, 0, h) - np.cos(x))[5:-5])
        e2 = np.max(np.abs(diff2(f, 0, h) + np.sin(x))[5:-5])
        errs.append((e1, e2))
    assert errs[0][0] / errs[1][0] == pytest.approx(4.0, rel=0.05)
    assert errs[0][1] / errs[1][1] == pytest.approx(4.0, rel=0.05)
