import numpy as np
import pytest

from jumpfilter.diffeo import check_bilipschitz
from jumpfilter.families import FAMILIES, make_family
from jumpfilter.model import CoefficientSet, JumpMeasure, SamplePlan, mollify_coefficients, truncate_coefficients, \
    validate_assumptions


@pytest.fixture(scope="module")
def truncated_linear():
    return truncate_coefficients(make_family("linear", slope=1.0), n=2, R=1.0)


@pytest.fixture(scope="module")
def truncated_sine():
    return truncate_coefficients(make_family("sine_jump", amplitude=0.5), n=2, R=1.0)


def _x(n=200, lo=-3.0, hi=3.0):
    return np.linspace(lo, hi, n)[:, None]


def test_jump_measure_moments():
    nu = JumpMeasure(np.array([[1.0], [-0.5]]), [0.6, 0.4])
    assert nu.total_mass == pytest.approx(1.0)
    assert nu.mean_vector[0] == pytest.approx(0.4)
    assert nu.moment(2) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        JumpMeasure(np.array([[1.0]]), [-1.0])


def test_gaussian_jump_measure_moments():
    nu = JumpMeasure.gaussian(2.0, 0.3, 0.5)
    assert nu.total_mass == pytest.approx(2.0)
    assert nu.mean_vector[0] / 2.0 == pytest.approx(0.3, abs=1e-12)
    assert nu.moment(2) / 2.0 == pytest.approx(0.3 ** 2 + 0.25, abs=1e-12)


def test_xi_needs_measure():
    z = CoefficientSet.zero()
    with pytest.raises(ValueError):
        z.replace(xi=lambda t, x, y, zz: x)


@pytest.mark.parametrize("name", sorted(FAMILIES))
def test_family_shapes(name):
    c = make_family(name)
    x = np.zeros((7, c.d))
    y = np.zeros((7, c.d_obs))
    assert c.b(0.0, x, y).shape == (7, c.d)
    assert c.B(0.0, x, y).shape == (7, c.d_obs)
    assert c.sigma(0.0, x, y).shape == (7, c.d, c.d_w)
    assert c.rho(0.0, x, y).shape == (7, c.d, c.d_obs)
    a = c.diffusion_matrix(0.0, x, y)
    assert np.all(np.linalg.eigvalsh(a) >= -1e-14)


def test_unknown_family_rejected():
    with pytest.raises(ValueError, match="unknown coefficient family"):
        make_family("nope")


def test_analytic_derivatives_match_differences(benchmark):
    x = _x(50)
    y = np.zeros((50, 1))
    for name in ("b", "B"):
        analytic = benchmark.jacobian(name, 0.0, x, y)
        fd = benchmark.replace(derivs={}).jacobian(name, 0.0, x, y)
        np.testing.assert_allclose(analytic, fd, atol=1e-8)
    z = np.array([1.0])
    np.testing.assert_allclose(benchmark.jacobian("xi", 0.0, x, y, z),
                               benchmark.replace(derivs={}).jacobian("xi", 0.0, x, y, z), atol=1e-8)


# assumption validation -------------------------------------------------


def test_validate_zero_model_passes():
    rep = validate_assumptions(make_family("zero"))
    assert rep.passed
    assert rep["L"].estimated == 0.0
    assert rep["K"].estimated == 0.0


def test_validate_sine_determinant():
    rep = validate_assumptions(make_family("sine_jump", amplitude=0.5))
    assert rep.passed
    assert rep["lambda_det_xi"].estimated == pytest.approx(0.5, abs=1e-3)


def test_validate_flags_wrong_lipschitz_claim():
    rep = validate_assumptions(make_family("linear", slope=2.0, L=1.0))
    assert not rep.passed
    failed = {c.name for c in rep.failures()}
    assert "L" in failed
    assert rep["L"].estimated == pytest.approx(2.0, rel=1e-6)


def test_validate_benchmark_passes(benchmark):
    assert validate_assumptions(benchmark, SamplePlan(n_points=500)).passed


def test_report_text_lists_every_check():
    rep = validate_assumptions(make_family("heat"))
    lines = rep.to_text().splitlines()
    assert len(lines) == len(rep.checks) + 1
    assert all(("pass" in ln) or ("FAIL" in ln) for ln in lines[1:])


def test_empty_sample_plan_rejected():
    with pytest.raises(ValueError):
        validate_assumptions(make_family("zero"), SamplePlan(n_points=0))


# truncation ------------------------------------------------------------


def test_truncation_identity_inside_ball(truncated_linear):
    c0 = make_family("linear", slope=1.0)
    x = _x(101, -1.0, 1.0)
    y = np.zeros((101, 1))
    # chi(|(x, y)| / n) = 1 for |(x, y)| <= n
    np.testing.assert_allclose(truncated_linear.b(0.0, x, y), c0.b(0.0, x, y), atol=1e-14)


def test_truncated_linear_drift_bounded(truncated_linear):
    n = 2
    x = _x(2001, -20, 20)
    y = np.zeros((2001, 1))
    assert np.max(np.abs(truncated_linear.b(0.0, x, y))) <= 2 * n
    far = np.array([[4.5], [-4.5]])
    np.testing.assert_array_equal(truncated_linear.b(0.0, far, np.zeros((2, 1))), 0.0)
    assert truncated_linear.support_radius >= 2 * n


def test_truncated_jump_is_bilipschitz(truncated_sine):
    c = truncated_sine
    z = c.nu1.marks[0]
    zeta = lambda x: c.xi(0.0, x, np.zeros(1), z)  # noqa: E731
    xs = np.linspace(-40, 40, 20001)[:, None]
    lo, hi = check_bilipschitz(zeta, np.linspace(0, 1, 11), xs[:-1], xs[1:])
    L_orig = 1.5  # the untruncated map x + sin(x)/2 has distortion in [1/2, 3/2]
    M = max(hi, 1 / lo)
    assert M <= 1.25 * 2.0 + 1e-6
    assert c.constants.lam <= lo + 1e-9
    assert M >= L_orig - 1e-3


def test_truncation_bad_arguments():
    with pytest.raises(ValueError):
        truncate_coefficients(make_family("heat"), n=0, R=1.0)


# mollification of coefficients -----------------------------------------


def test_mollified_constant_unchanged():
    c = truncate_coefficients(make_family("heat"), n=3, R=1.0)
    m = mollify_coefficients(c, 0.1)
    x = _x(51, -2.0, 2.0)
    y = np.zeros((51, 1))
    np.testing.assert_allclose(m.sigma(0.0, x, y), c.sigma(0.0, x, y), atol=1e-12)


@pytest.mark.parametrize("eps", [0.2, 0.1, 0.05])
def test_mollified_linear_drift_close(truncated_linear, eps):
    m = mollify_coefficients(truncated_linear, eps)
    x = _x(41, -1.0, 1.0)
    y = np.zeros((41, 1))
    # the bump is symmetric, so a linear function is reproduced exactly away from the cutoff
    err = np.max(np.abs(m.b(0.0, x, y) - truncated_linear.b(0.0, x, y)))
    assert err <= eps ** 2


def test_mollified_jump_keeps_determinant(truncated_sine):
    m = mollify_coefficients(truncated_sine, 0.1)
    x = _x(2001, -15, 15)
    y = np.zeros((2001, 1))
    z = m.nu1.marks[0]
    for th in np.linspace(0, 1, 11):
        det = 1 + th * m.jacobian("xi", 0.0, x, y, z)[:, 0, 0]
        assert det.min() >= truncated_sine.constants.lam - 1e-9


def test_mollification_requires_compact_support():
    with pytest.raises(ValueError):
        mollify_coefficients(make_family("heat"), 0.1)
