"""Gaussian mollification of grid functions and point measures.

``k_eps`` is the centred normal density with covariance ``eps * I``. The
mollification of a measure ``mu`` is ``x -> int k_eps(x - y) mu(dy)``; an
operator ``L`` acting on the kernel in its ``y`` argument gives the
adjoint-mollified quantity ``x -> int L_y k_eps(x - y) mu(dy)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import hermite_e
from scipy.signal import fftconvolve

from .grid import GridDensity

COVERAGE_SIGMAS = 6.0
KERNEL_TRUNCATION_SIGMAS = 8.0


@dataclass(frozen=True)
class GaussianKernel:
    """Normal density with variance ``eps`` per coordinate."""

    eps: float
    d: int = 1

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x ** 2, axis=-1)
        return np.exp(-0.5 * r2 / self.eps) / (2 * np.pi * self.eps) ** (self.d / 2)

    def derivative(self, x: np.ndarray, order: Sequence[int] | int) -> np.ndarray:
        """``D^order k_eps(x)`` via probabilists' Hermite polynomials (product form)."""
        x = np.asarray(x, dtype=float)
        order = _as_order(order, self.d)
        s = math.sqrt(self.eps)
        out = self(x)
        for axis, n in enumerate(order):
            if n == 0:
                continue
            coef = np.zeros(n + 1)
            coef[n] = 1.0
            out = out * (-1) ** n * s ** (-n) * hermite_e.hermeval(x[..., axis] / s, coef)
        return out

    def discrete(self, h: float, order: Sequence[int] | int = 0, normalize: bool = True) -> np.ndarray:
        """Kernel (or derivative) on the stencil ``h * (-K..K)^d`` truncated at 8 standard deviations.

        With ``normalize`` the order-0 stencil is scaled to unit discrete mass.
        """
        half = max(1, int(math.ceil(KERNEL_TRUNCATION_SIGMAS * math.sqrt(self.eps) / h)))
        offsets = h * np.arange(-half, half + 1)
        mesh = np.stack(np.meshgrid(*([offsets] * self.d), indexing="ij"), axis=-1)
        order = _as_order(order, self.d)
        vals = self.derivative(mesh, order) if any(order) else self(mesh)
        if normalize and not any(order):
            vals = vals / (vals.sum() * h ** self.d)
        return vals


def _as_order(order, d: int) -> tuple[int, ...]:
    if np.isscalar(order):
        order = (int(order),) + (0,) * (d - 1)
    order = tuple(int(o) for o in order)
    if len(order) != d or min(order) < 0:
        raise ValueError(f"derivative order must have {d} nonnegative entries")
    return order


@dataclass
class PointMeasure:
    """Finite weighted point measure ``sum_j w_j delta_{x_j}``."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        self.points = pts
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.weights.size != pts.shape[0]:
            raise ValueError("one weight per point required")

    @classmethod
    def from_grid(cls, u: GridDensity) -> "PointMeasure":
        """Rectangle-rule point measure of a grid function (node masses ``u h^d``)."""
        return cls(u.flat_points(), u.values.reshape(-1) * u.cell_volume)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def support_box(self) -> tuple[np.ndarray, np.ndarray] | None:
        nz = self.weights != 0
        if not nz.any():
            return None
        pts = self.points[nz]
        return pts.min(axis=0), pts.max(axis=0)

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(self.weights @ fn(self.points))


def _check_coverage(target_box, grid: GridDensity, eps: float) -> None:
    if target_box is None:
        return
    lo, hi = target_box
    pad = COVERAGE_SIGMAS * math.sqrt(eps)
    slack = 1e-9 * grid.h
    if np.any(grid.lower > lo - pad + slack) or np.any(grid.upper < hi + pad - slack):
        raise ValueError(
            f"output grid [{grid.lower}, {grid.upper}] does not cover the target support "
            f"[{lo}, {hi}] padded by 6 sqrt(eps) = {pad:.4g}"
        )


def _embed(u: GridDensity, grid: GridDensity) -> np.ndarray:
    """Values of ``u`` placed on the (aligned, equal-spacing) output grid; zero elsewhere."""
    if not np.isclose(u.h, grid.h, rtol=1e-12):
        raise ValueError("grid functions must share the output grid spacing")
    shift = (u.lower - grid.lower) / grid.h
    idx = np.rint(shift).astype(int)
    if np.any(np.abs(shift - idx) > 1e-6):
        raise ValueError("target grid is not aligned with the output grid")
    out = np.zeros(grid.shape)
    src = []
    dst = []
    for k in range(grid.d):
        a = max(0, idx[k])
        b = min(grid.shape[k], idx[k] + u.shape[k])
        if b <= a:
            return out
        dst.append(slice(a, b))
        src.append(slice(a - idx[k], b - idx[k]))
    out[tuple(dst)] = u.values[tuple(src)]
    return out


def mollify(target: GridDensity | PointMeasure, eps: float, grid: GridDensity | None = None,
            order: Sequence[int] | int = 0) -> GridDensity:
    """``D^order`` of the Gaussian mollification of a grid function or point measure.

    Grid functions are convolved by FFT with the discrete kernel; point
    measures are summed directly. The output grid must cover the target's
    support padded by ``6 sqrt(eps)``.
    """
    if grid is None:
        if not isinstance(target, GridDensity):
            raise ValueError("an output grid is required for point measures")
        grid = target
    kernel = GaussianKernel(eps, grid.d)
    if isinstance(target, GridDensity):
        _check_coverage(target.support_box(), grid, eps)
        values = _embed(target, grid)
        stencil = kernel.discrete(grid.h, order)
        out = fftconvolve(values, stencil, mode="same") * grid.cell_volume
        return grid.like(out, t=target.t)
    if isinstance(target, PointMeasure):
        _check_coverage(target.support_box(), grid, eps)
        return grid.like(_direct_sum(target, grid, lambda diff: _kernel_eval(kernel, diff, order)))
    raise TypeError(f"cannot mollify object of type {type(target).__name__}")


def _kernel_eval(kernel: GaussianKernel, diff: np.ndarray, order) -> np.ndarray:
    order = _as_order(order, kernel.d)
    return kernel.derivative(diff, order) if any(order) else kernel(diff)


def _direct_sum(mu: PointMeasure, grid: GridDensity, fn: Callable[[np.ndarray], np.ndarray],
                chunk: int = 2 ** 21) -> np.ndarray:
    """``sum_j w_j fn(x - y_j)`` at grid nodes ``x``; ``fn`` maps differences to values."""
    nodes = grid.flat_points()
    out = np.zeros(nodes.shape[0])
    keep = mu.weights != 0
    pts, w = mu.points[keep], mu.weights[keep]
    step = max(1, chunk // max(1, nodes.shape[0]))
    for s in range(0, pts.shape[0], step):
        diff = nodes[:, None, :] - pts[None, s:s + step, :]
        out += fn(diff) @ w[s:s + step]
    return out.reshape(grid.shape)


# ---------------------------------------------------------------------------
# operator descriptors


@dataclass(frozen=True)
class DiffOperator:
    """``a^{ij}(y) D_ij + b^i(y) D_i + c(y)``; any part may be None.

    ``a`` maps ``(..., d)`` to ``(..., d, d)``, ``b`` to ``(..., d)``, ``c`` to ``(...)``.
    """

    a: Callable | None = None
    b: Callable | None = None
    c: Callable | None = None


@dataclass(frozen=True)
class JumpOperator:
    """Jump operator of kind ``T``, ``I`` or ``J`` for the map ``y -> y + zeta(y)``.

    ``T phi = phi(tau)``, ``I phi = phi(tau) - phi`` and
    ``J phi = phi(tau) - phi - zeta^i D_i phi``.
    """

    kind: str
    zeta: Callable

    def __post_init__(self):
        if self.kind not in ("T", "I", "J"):
            raise ValueError(f"unknown jump operator kind {self.kind!r}")


IDENTITY = DiffOperator(c=lambda y: np.ones(y.shape[:-1]))


def _add(order: tuple[int, ...], axis: int, n: int = 1) -> tuple[int, ...]:
    lst = list(order)
    lst[axis] += n
    return tuple(lst)


def adjoint_mollify(op: DiffOperator | JumpOperator, mu: GridDensity | PointMeasure, eps: float,
                    grid: GridDensity | None = None, order: Sequence[int] | int = 0) -> GridDensity:
    """``x -> D^order_x int L_y k_eps(x - y) mu(dy)`` on the grid nodes.

    Grid functions enter through their rectangle-rule node masses, so the
    result is a direct sum over nodes (no FFT).
    """
    if isinstance(mu, GridDensity):
        if grid is None:
            grid = mu
        measure = PointMeasure.from_grid(mu)
    elif isinstance(mu, PointMeasure):
        measure = mu
    else:
        raise TypeError(f"unsupported measure type {type(mu).__name__}")
    if grid is None:
        raise ValueError("an output grid is required for point measures")
    d = grid.d
    kernel = GaussianKernel(eps, d)
    base = _as_order(order, d)
    pts = measure.points
    nodes = grid.flat_points()

    if isinstance(op, DiffOperator):
        # d/dy_i k(x - y) = -(D_i k)(x - y); second y-derivatives carry no sign
        terms: list[tuple[np.ndarray, tuple[int, ...], float]] = []
        if op.c is not None:
            terms.append((np.asarray(op.c(pts), dtype=float).reshape(-1), base, 1.0))
        if op.b is not None:
            bv = np.asarray(op.b(pts), dtype=float).reshape(-1, d)
            for i in range(d):
                terms.append((bv[:, i], _add(base, i), -1.0))
        if op.a is not None:
            av = np.asarray(op.a(pts), dtype=float).reshape(-1, d, d)
            for i in range(d):
                for j in range(d):
                    terms.append((av[:, i, j], _add(_add(base, i), j), 1.0))
        out = np.zeros(nodes.shape[0])
        for coef, ordr, sign in terms:
            if not np.any(coef):
                continue
            weighted = PointMeasure(pts, measure.weights * coef * sign)
            out += _direct_sum(weighted, grid, lambda diff, o=ordr: _kernel_eval(kernel, diff, o)).reshape(-1)
        return grid.like(out.reshape(grid.shape), t=getattr(mu, "t", grid.t))

    if isinstance(op, JumpOperator):
        zeta = np.asarray(op.zeta(pts), dtype=float).reshape(-1, d)
        moved = PointMeasure(pts + zeta, measure.weights)
        out = _direct_sum(moved, grid, lambda diff: _kernel_eval(kernel, diff, base)).reshape(-1)
        if op.kind in ("I", "J"):
            out -= _direct_sum(measure, grid, lambda diff: _kernel_eval(kernel, diff, base)).reshape(-1)
        if op.kind == "J":
            for i in range(d):
                weighted = PointMeasure(pts, measure.weights * zeta[:, i])
                out += _direct_sum(weighted, grid,
                                   lambda diff, o=_add(base, i): _kernel_eval(kernel, diff, o)).reshape(-1)
        return grid.like(out.reshape(grid.shape), t=getattr(mu, "t", grid.t))

    raise TypeError(f"unsupported operator descriptor {type(op).__name__}")


# ---------------------------------------------------------------------------
# p-fold kernel


def rho_constant(eps: float, p: int, d: int = 1) -> float:
    return p ** (-d / 2) * (2 * np.pi * eps) ** ((1 - p) * d / 2)


def _as_tuple_points(y: np.ndarray, p: int, d: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if d == 1 and y.shape[-1] == p and (y.ndim == 1 or y.shape[-2:] != (p, 1)):
        y = y[..., None]
    if y.shape[-2:] != (p, d):
        y = y.reshape(y.shape[:-1] + (p, d))
    return y


def rho_eps(y: np.ndarray, eps: float, p: int, d: int = 1) -> np.ndarray:
    """Closed form of ``int prod_r k_eps(x - y_r) dx``; ``y`` has shape ``(..., p, d)`` or ``(..., p)``."""
    if p < 2:
        raise ValueError("p must be an integer >= 2")
    y = _as_tuple_points(y, p, d)
    diff = y[..., :, None, :] - y[..., None, :, :]
    total = 0.5 * np.sum(diff ** 2, axis=(-1, -2, -3))  # sum over r < s
    return rho_constant(eps, p, d) * np.exp(-total / (2 * eps * p))


def rho_eps_gradient(y: np.ndarray, eps: float, p: int, d: int = 1) -> np.ndarray:
    """``d rho / d y_r^i = (1 / (eps p)) sum_s (y_s^i - y_r^i) rho``; shape ``(..., p, d)``."""
    y = _as_tuple_points(y, p, d)
    rho = rho_eps(y, eps, p, d)
    spread = np.sum(y, axis=-2, keepdims=True) - p * y
    return spread * rho[..., None, None] / (eps * p)


def rho_eps_quadrature(y: np.ndarray, eps: float, n_nodes: int = 200) -> np.ndarray:
    """``int prod_r k_eps(x - y_r) dx`` in one dimension by Gauss-Hermite quadrature.

    The product of Gaussians is itself Gaussian in ``x`` with variance
    ``eps / p`` about the mean of the ``y_r``; expanding about that centre
    keeps the quadrature exact up to the node count.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    p = y.shape[-1]
    kernel = GaussianKernel(eps, 1)
    nodes, weights = hermite_e.hermegauss(n_nodes)
    centre = y.mean(axis=-1, keepdims=True)
    scale = math.sqrt(eps / p)
    x = centre + scale * nodes  # (..., n)
    prod = np.prod(kernel(x[..., None, :, None] - y[..., :, None, None]), axis=-2)
    # weight function exp(-s^2/2) is divided out
    integrand = prod * np.exp(0.5 * nodes ** 2)
    return scale * integrand @ weights


@dataclass
class KernelIdentityReport:
    eps_r: float
    eps_s: float
    p: int
    q: int
    semigroup_error: float
    rho_rel_error: float
    zero_sum_error: float
    partial_rho_error: float
    moment_constant: float
    n_samples: int

    def to_text(self) -> str:
        rows = [(k, getattr(self, k)) for k in self.__dataclass_fields__]
        return "\n".join(f"{k} {v:.17g}" if isinstance(v, float) else f"{k} {v}" for k, v in rows) + "\n"


def semigroup_error(eps_r: float, eps_s: float, x: np.ndarray, z: np.ndarray, n_nodes: int = 120) -> float:
    """Max over samples of ``|int k_r(x - w) k_s(w - z) dw - k_{r+s}(x - z)|`` (one dimension)."""
    kr, ks, krs = GaussianKernel(eps_r), GaussianKernel(eps_s), GaussianKernel(eps_r + eps_s)
    nodes, weights = hermite_e.hermegauss(n_nodes)
    x = np.asarray(x, dtype=float)[:, None]
    z = np.asarray(z, dtype=float)[:, None]
    # the integrand is Gaussian in w with this centre and variance
    var = eps_r * eps_s / (eps_r + eps_s)
    centre = (x * eps_s + z * eps_r) / (eps_r + eps_s)
    w = centre + math.sqrt(var) * nodes
    integrand = kr(x[..., None] - w[..., None]) * ks(w[..., None] - z[..., None]) * np.exp(0.5 * nodes ** 2)
    quad = math.sqrt(var) * integrand @ weights
    return float(np.max(np.abs(quad - krs(x - z))))


def check_kernel_identities(eps_r: float, eps_s: float, p: int, q: int, n_samples: int = 200,
                            spread: float = 1.0, seed: int = 0) -> KernelIdentityReport:
    """Sampled violations of the Gaussian kernel identities in one dimension.

    ``semigroup_error`` uses ``eps_r, eps_s``; the ``p``-fold identities use
    ``eps = eps_r``. ``moment_constant`` is the sampled sup of
    ``eps^{-q} sum_{s != r} |y_s - y_r|^{2q} rho_eps / rho_{2 eps}``.
    """
    if q not in (1, 2):
        raise ValueError("q must be 1 or 2")
    if p < 2:
        raise ValueError("p must be >= 2")
    rng = np.random.default_rng(seed)
    eps = eps_r
    sq = math.sqrt(eps)
    x = rng.normal(scale=spread, size=n_samples)
    z = rng.normal(scale=spread, size=n_samples)
    sg = semigroup_error(eps_r, eps_s, x, z)

    y = rng.normal(scale=spread * sq * 2, size=(n_samples, p))
    closed = rho_eps(y, eps, p)
    quad = rho_eps_quadrature(y, eps)
    rel = float(np.max(np.abs(closed - quad) / closed))

    grad = rho_eps_gradient(y, eps, p)[..., 0]
    zero_sum = float(np.max(np.abs(grad.sum(axis=-1))) / rho_constant(eps, p) * eps)

    fd = np.zeros_like(grad)
    step = 1e-5 * sq
    for r in range(p):
        e = np.zeros(p)
        e[r] = step
        fd[:, r] = (rho_eps(y + e, eps, p) - rho_eps(y - e, eps, p)) / (2 * step)
    scale = rho_constant(eps, p) / sq
    partial = float(np.max(np.abs(fd - grad)) / scale)

    diff = np.abs(y[:, :, None] - y[:, None, :]) ** (2 * q)
    lhs = eps ** (-q) * diff.sum(axis=2).max(axis=1) * closed
    ratio = float(np.max(lhs / rho_eps(y, 2 * eps, p)))
    return KernelIdentityReport(eps_r, eps_s, p, q, sg, rel, zero_sum, partial, ratio, n_samples)
