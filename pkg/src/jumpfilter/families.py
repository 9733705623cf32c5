"""Built-in one-dimensional coefficient families, selectable by name."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .cutoffs import chi, chi_derivative
from .model import CoefficientSet, Constants, JumpMeasure, batch_shape


def _vec(f: Callable) -> Callable:
    """Lift ``f(t, x, y)`` on scalars to the ``(..., 1)`` array convention."""

    def fn(t, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = batch_shape(x, y)
        return np.broadcast_to(f(t, x[..., 0], y[..., 0]), shape)[..., None].astype(float)

    return fn


def _mat(f: Callable) -> Callable:
    vec = _vec(f)
    return lambda t, x, y: vec(t, x, y)[..., None]


def _jump(f: Callable) -> Callable:
    """Lift ``f(t, x, y, z)`` on scalars to jump-coefficient arrays."""

    def fn(t, x, y, z):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        shape = np.broadcast_shapes(batch_shape(x, y), z.shape[:-1])
        return np.broadcast_to(f(t, x[..., 0], y[..., 0], z[..., 0]), shape)[..., None].astype(float)

    return fn


def _jump_jac(f: Callable) -> Callable:
    lifted = _jump(f)
    return lambda t, x, y, z: lifted(t, x, y, z)[..., None]


def _zero_matrix_jac(t, x, y):
    return np.zeros(batch_shape(np.asarray(x), np.asarray(y)) + (1, 1, 1))


def _const(c: float) -> Callable:
    return lambda t, x, y: c + 0.0 * x


def zero() -> CoefficientSet:
    return CoefficientSet.zero(name="zero")


def ou(theta: float = 1.0, a: float = 1.0) -> CoefficientSet:
    """``dX = -theta X dt + sqrt(2a) dW``; stationary law ``N(0, a / theta)``."""
    s = float(np.sqrt(2 * a))
    return CoefficientSet(
        1, 1, 1, b=_vec(lambda t, x, y: -theta * x), B=_vec(lambda t, x, y: 0.0 * x),
        sigma=_mat(_const(s)), rho=_mat(_const(0.0)),
        constants=Constants(K0=s, K1=theta, K=1.0, L=max(theta, 1e-12), m=1),
        derivs={"b": _mat(_const(-theta))},
        jumps_depend_on_ty=False, fields_depend_on_ty=False, benign_B_zero=True,
        name="ou", params={"theta": theta, "a": a})


def heat(a: float = 1.0) -> CoefficientSet:
    """Pure diffusion with ``a = sigma^2 / 2``."""
    s = float(np.sqrt(2 * a))
    return CoefficientSet(
        1, 1, 1, b=_vec(_const(0.0)), B=_vec(_const(0.0)), sigma=_mat(_const(s)),
        rho=_mat(_const(0.0)), constants=Constants(K0=s, K1=0.0, K=1.0, L=1.0, m=1),
        jumps_depend_on_ty=False, fields_depend_on_ty=False, benign_B_zero=True,
        name="heat", params={"a": a})


def linear(slope: float = 2.0, L: float | None = None) -> CoefficientSet:
    """``b(x) = slope * x`` with a caller-declared Lipschitz constant (possibly wrong)."""
    return CoefficientSet(
        1, 1, 1, b=_vec(lambda t, x, y: slope * x), B=_vec(_const(0.0)), sigma=_mat(_const(0.0)),
        rho=_mat(_const(0.0)), constants=Constants(K0=1.0, K1=abs(slope), K=1.0, L=abs(slope) if L is None else L, m=1),
        jumps_depend_on_ty=False, fields_depend_on_ty=False, benign_B_zero=True,
        name="linear", params={"slope": slope, "L": L})


def jump_only(c: float = 0.5, rate: float = 1.0, mark: float = 1.0) -> CoefficientSet:
    """Only observation jumps: ``X += c`` and ``Y += mark`` at rate ``rate``."""
    zero_vec = _vec(_const(0.0))
    return CoefficientSet(
        1, 1, 1, b=zero_vec, B=zero_vec, sigma=_mat(_const(0.0)), rho=_mat(_const(0.0)),
        xi=_jump(lambda t, x, y, z: c + 0.0 * x), nu1=JumpMeasure.point([mark], rate),
        xi_bar=lambda z: abs(c),
        constants=Constants(K0=max(1.0, abs(mark) * np.sqrt(rate)), K1=0.0, K=1.0, L=1.0,
                            lam=1.0, K_xi=abs(c), m=1),
        derivs={"xi": _jump_jac(lambda t, x, y, z: 0.0 * x)},
        jumps_depend_on_ty=False, fields_depend_on_ty=False, benign_B_zero=True,
        name="jump_only", params={"c": c, "rate": rate, "mark": mark})


def sine_jump(amplitude: float = 0.5, rate: float = 1.0, mark: float = 1.0) -> CoefficientSet:
    """Observation jumps ``xi(x, z) = z * amplitude * sin(x)`` with a single mark."""
    zero_vec = _vec(_const(0.0))
    A = amplitude
    return CoefficientSet(
        1, 1, 1, b=zero_vec, B=zero_vec, sigma=_mat(_const(0.0)), rho=_mat(_const(0.0)),
        xi=_jump(lambda t, x, y, z: z * A * np.sin(x)), nu1=JumpMeasure.point([mark], rate),
        xi_bar=lambda z: abs(A) * float(np.linalg.norm(z)),
        constants=Constants(K0=max(1.0, abs(mark) * np.sqrt(rate)), K1=0.0, K=1.0, L=1.5,
                            lam=1.0 - abs(A * mark), K_xi=abs(A * mark), m=1),
        derivs={"xi": _jump_jac(lambda t, x, y, z: z * A * np.cos(x))},
        jumps_depend_on_ty=False, fields_depend_on_ty=False, benign_B_zero=True,
        name="sine_jump", params={"amplitude": amplitude, "rate": rate, "mark": mark})


BENCHMARK_MARKS = (1.0, -0.5)
BENCHMARK_RATES = (0.6, 0.4)


def bounded_benchmark(cut: float = 3.0, sigma: float = 1.0, rho: float = 0.5,
                      rates: tuple[float, float] = BENCHMARK_RATES) -> CoefficientSet:
    """Bounded nonlinear filtering benchmark.

    ``b = (-x + sin(x) / 2) chi(|x| / cut)``, constant ``sigma`` and ``rho``,
    ``B = tanh(x)``, observation jumps ``xi = z (1/2 + sin(x) / 4)`` with
    marks ``+1`` and ``-1/2``.
    """

    def b(t, x, y):
        return (-x + 0.5 * np.sin(x)) * chi(x / cut)

    def db(t, x, y):
        return (-1 + 0.5 * np.cos(x)) * chi(x / cut) + (-x + 0.5 * np.sin(x)) * chi_derivative(x / cut) / cut

    def xi(t, x, y, z):
        return z * (0.5 + 0.25 * np.sin(x))

    def dxi(t, x, y, z):
        return z * 0.25 * np.cos(x)

    nu1 = JumpMeasure(np.array(BENCHMARK_MARKS)[:, None], np.array(rates))
    return CoefficientSet(
        1, 1, 1, b=_vec(b), B=_vec(lambda t, x, y: np.tanh(x)), sigma=_mat(_const(sigma)),
        rho=_mat(_const(rho)), xi=_jump(xi), nu1=nu1,
        xi_bar=lambda z: 0.75 * float(np.linalg.norm(z)),
        constants=Constants(K0=6.0, K1=0.0, K=1.0, L=6.0, lam=0.75, K_xi=0.75, m=1),
        derivs={"b": _mat(db), "B": _mat(lambda t, x, y: 1.0 / np.cosh(x) ** 2),
                "sigma": _zero_matrix_jac, "rho": _zero_matrix_jac,
                "xi": _jump_jac(dxi)},
        support_radius=None, jumps_depend_on_ty=False, fields_depend_on_ty=False,
        name="bounded_benchmark", params={"cut": cut, "sigma": sigma, "rho": rho})


FAMILIES: dict[str, Callable[..., CoefficientSet]] = {
    "zero": zero,
    "ou": ou,
    "heat": heat,
    "linear": linear,
    "jump_only": jump_only,
    "sine_jump": sine_jump,
    "bounded_benchmark": bounded_benchmark,
}


def make_family(name: str, **params) -> CoefficientSet:
    try:
        factory = FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown coefficient family {name!r}; known: {sorted(FAMILIES)}") from None
    return factory(**params)
