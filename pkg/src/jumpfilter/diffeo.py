"""Jump maps ``x -> x + theta * zeta(x)``: inversion, reflected functions and truncation.

Points are arrays of shape ``(..., d)``; Jacobians have shape ``(..., d, d)``
with the last axis the differentiation direction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .cutoffs import bump_quadrature

FD_STEP = 1e-4


class InversionError(RuntimeError):
    """The inverse solver did not converge; the map is probably not a diffeomorphism."""


class SandySearchError(RuntimeError):
    """No admissible truncation parameter was found."""


def fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Fourth-order centred finite-difference Jacobian of ``fn`` at ``x``.

    Returns ``out_shape + (d,)`` per point, the last axis being the direction.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    cols = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        cols.append((-fn(x + 2 * e) + 8 * fn(x + e) - 8 * fn(x - e) + fn(x - 2 * e)) / (12 * h))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class DiffeoMap:
    """The map ``tau(x) = x + theta * zeta(x)`` together with derivative access."""

    zeta: Callable[[np.ndarray], np.ndarray]
    d: int = 1
    theta: float = 1.0
    dzeta: Callable[[np.ndarray], np.ndarray] | None = None
    lam: float | None = None
    lip: float | None = None
    tol: float = 1e-12
    max_iter: int = 100

    def zeta_jacobian(self, x: np.ndarray) -> np.ndarray:
        if self.dzeta is not None:
            return np.asarray(self.dzeta(x), dtype=float)
        return fd_jacobian(self.zeta, x)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x + self.theta * self.zeta(x)

    __call__ = apply

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.eye(self.d) + self.theta * self.zeta_jacobian(x)

    def with_theta(self, theta: float) -> "DiffeoMap":
        return replace(self, theta=float(theta))

    def scaled(self, factor: float) -> "DiffeoMap":
        """Map for ``factor * zeta`` with the same theta."""
        dz = None if self.dzeta is None else (lambda x: factor * self.dzeta(x))
        lip = None if self.lip is None else abs(factor) * self.lip
        return replace(self, zeta=lambda x: factor * self.zeta(x), dzeta=dz, lip=lip, lam=None)


def _solve(J: np.ndarray, r: np.ndarray) -> np.ndarray:
    if J.shape[-1] == 1:
        return r / J[..., 0]
    return np.linalg.solve(J, r[..., None])[..., 0]


def invert(m: DiffeoMap, x: np.ndarray, tol: float | None = None, max_iter: int | None = None) -> np.ndarray:
    """Solve ``tau(x') = x`` pointwise by damped Newton iteration.

    The residual ``|tau(x') - x|`` is driven below ``tol`` (floored at a few
    ulps of ``|x|``). Points where a Newton step fails to reduce the residual
    fall back to the fixed-point step ``x - theta * zeta(x_k)`` when
    ``theta * lip < 0.9``, otherwise to a halved Newton step.
    """
    tol = m.tol if tol is None else tol
    max_iter = m.max_iter if max_iter is None else max_iter
    target = np.asarray(x, dtype=float)
    shape = target.shape
    target = target.reshape(-1, m.d)
    floor = 8 * np.finfo(float).eps * (1.0 + np.linalg.norm(target, axis=-1))
    tols = np.maximum(tol, floor)
    contraction = m.lip is not None and m.theta * m.lip < 0.9

    out = target - m.theta * m.zeta(target)
    res = m.apply(out) - target
    err = np.linalg.norm(res, axis=-1)
    for _ in range(max_iter):
        active = err > tols
        if not active.any():
            return out.reshape(shape)
        idx = np.flatnonzero(active)
        xa, ra, ea = out[idx], res[idx], err[idx]
        step = _solve(m.jacobian(xa), ra)
        best_x, best_r, best_e = xa.copy(), ra.copy(), ea.copy()
        pending = np.ones(idx.size, dtype=bool)
        scale = 1.0
        for _halving in range(8):
            cand = xa[pending] - scale * step[pending]
            cr = m.apply(cand) - target[idx[pending]]
            ce = np.linalg.norm(cr, axis=-1)
            ok = np.isfinite(ce) & (ce < ea[pending])
            sel = np.flatnonzero(pending)[ok]
            best_x[sel], best_r[sel], best_e[sel] = cand[ok], cr[ok], ce[ok]
            pending[sel] = False
            if not pending.any():
                break
            scale *= 0.5
        if pending.any() and contraction:
            sel = np.flatnonzero(pending)
            cand = target[idx[sel]] - m.theta * m.zeta(xa[sel])
            cr = m.apply(cand) - target[idx[sel]]
            best_x[sel], best_r[sel], best_e[sel] = cand, cr, np.linalg.norm(cr, axis=-1)
        out[idx], res[idx], err[idx] = best_x, best_r, best_e
    bad = err > tols
    if bad.any():
        raise InversionError(
            f"inverse solver failed at {int(bad.sum())} points; max residual {float(err.max()):.3e}"
        )
    return out.reshape(shape)


def inverse_jacobian_det(m: DiffeoMap, x: np.ndarray, x_inv: np.ndarray | None = None) -> np.ndarray:
    """``|det D tau^{-1}(x)|`` via the inverse function theorem."""
    if x_inv is None:
        x_inv = invert(m, x)
    return 1.0 / np.abs(np.linalg.det(m.jacobian(x_inv)))


def zeta_star(m: DiffeoMap) -> Callable[[np.ndarray], np.ndarray]:
    """The reflected function ``x -> tau^{-1}(x) - x``."""

    def fn(x):
        x = np.asarray(x, dtype=float)
        return invert(m, x) - x

    return fn


def zeta_star_jacobian(m: DiffeoMap) -> Callable[[np.ndarray], np.ndarray]:
    """``D zeta* = (D tau)^{-1} o tau^{-1} - I``."""

    def fn(x):
        jac = m.jacobian(invert(m, x))
        return np.linalg.inv(jac) - np.eye(m.d)

    return fn


def frak_c(m: DiffeoMap) -> Callable[[np.ndarray], np.ndarray]:
    """``det(I + D zeta*) - 1``, evaluated as ``1 / det(D tau(tau^{-1} x)) - 1``."""

    def fn(x):
        jac = m.jacobian(invert(m, x))
        return 1.0 / np.linalg.det(jac) - 1.0

    return fn


def determinant_bounds(m: DiffeoMap, points: np.ndarray, theta_grid=np.linspace(0.0, 1.0, 11)) -> tuple[float, float]:
    """Min and max of ``|det(I + theta D zeta)|`` over sample points and the theta grid."""
    dz = m.zeta_jacobian(np.asarray(points, dtype=float).reshape(-1, m.d))
    eye = np.eye(m.d)
    dets = np.abs(np.linalg.det(eye + np.asarray(theta_grid)[:, None, None, None] * dz[None]))
    return float(dets.min()), float(dets.max())


def check_bilipschitz(zeta: Callable, theta_grid, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Min and max of ``|tau(x) - tau(y)| / |x - y|`` over sample pairs and theta values."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size == 0:
        raise ValueError("empty sample")
    keep = np.linalg.norm(x - y, axis=-1) > 0
    x, y = x[keep], y[keep]
    zx, zy = zeta(x), zeta(y)
    dist = np.linalg.norm(x - y, axis=-1)
    lo, hi = np.inf, -np.inf
    for th in np.atleast_1d(theta_grid):
        ratio = np.linalg.norm(x - y + th * (zx - zy), axis=-1) / dist
        lo = min(lo, float(ratio.min()))
        hi = max(hi, float(ratio.max()))
    return lo, hi


def local_distortion(jac_zeta: np.ndarray, theta_grid) -> tuple[float, float]:
    """Extreme singular values of ``I + theta D zeta`` over the given Jacobian samples."""
    jac_zeta = np.asarray(jac_zeta, dtype=float)
    d = jac_zeta.shape[-1]
    lo, hi = np.inf, -np.inf
    for th in np.atleast_1d(theta_grid):
        sv = np.linalg.svd(np.eye(d) + th * jac_zeta, compute_uv=False)
        lo = min(lo, float(sv[..., -1].min()))
        hi = max(hi, float(sv[..., 0].max()))
    return lo, hi


@dataclass(frozen=True)
class SandyKappa:
    """Radial cutoff equal to 1 on ``|x| <= R`` with logarithmic decay to 0.

    The profile is 1 up to ``R + 1``, ``1 + eps log((R + 1) / |x|)`` until
    ``(R + 1) e^{1/eps}``, and 0 beyond; it is averaged against the unit-ball
    bump with tensor Gauss-Legendre quadrature.
    """

    R: float
    eps: float
    d: int = 1
    n_nodes: int = 32

    def __post_init__(self):
        if not (self.R > 0 and self.eps > 0):
            raise ValueError("R and eps must be positive")

    @property
    def inner_radius(self) -> float:
        return self.R

    @property
    def outer_radius(self) -> float:
        return (self.R + 1.0) * np.exp(1.0 / self.eps) + 1.0

    @property
    def lipschitz_bound(self) -> float:
        return self.eps / (self.R + 1.0)

    def profile(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        r0 = self.R + 1.0
        with np.errstate(divide="ignore"):
            mid = 1.0 + self.eps * np.log(r0 / np.maximum(r, r0))
        return np.clip(mid, 0.0, 1.0)

    def profile_slope(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        r0 = self.R + 1.0
        zone = (r > r0) & (r < r0 * np.exp(1.0 / self.eps))
        return np.where(zone, -self.eps / np.where(zone, r, 1.0), 0.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        nodes, weights = bump_quadrature(self.d, self.n_nodes)
        r = np.linalg.norm(x[..., None, :] - nodes, axis=-1)
        return self.profile(r) @ weights

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        nodes, weights = bump_quadrature(self.d, self.n_nodes)
        diff = x[..., None, :] - nodes
        r = np.linalg.norm(diff, axis=-1)
        coef = self.profile_slope(r) / np.where(r > 0, r, 1.0)
        return np.einsum("...j,...jk,j->...k", coef, diff, weights)


def sandy_kappa(R: float, eps: float, d: int = 1) -> SandyKappa:
    return SandyKappa(R, eps, d)


def truncated_zeta(zeta: Callable, kappa: SandyKappa, scale: float = 1.0,
                   dzeta: Callable | None = None) -> tuple[Callable, Callable]:
    """``x -> kappa(x / scale) zeta(x)`` and its Jacobian."""

    def fn(x):
        x = np.asarray(x, dtype=float)
        return kappa(x / scale)[..., None] * zeta(x)

    def jac(x):
        x = np.asarray(x, dtype=float)
        dz = dzeta(x) if dzeta is not None else fd_jacobian(zeta, x)
        k = kappa(x / scale)[..., None, None]
        gk = kappa.gradient(x / scale) / scale
        return k * dz + zeta(x)[..., :, None] * gk[..., None, :]

    return fn, jac


def _certification_points(outer: float, d: int, inner: float, n_dense: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if d == 1:
        dense = np.linspace(-(inner + 2.0), inner + 2.0, n_dense)
        far = np.geomspace(inner + 1.0, outer + 1.0, n_dense // 2)
        pts = np.concatenate([dense, far, -far])
        return np.sort(pts)[:, None]
    radii = np.concatenate([rng.uniform(0, inner + 2.0, n_dense),
                            np.geomspace(inner + 1.0, outer + 1.0, n_dense)])
    dirs = rng.normal(size=(radii.size, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return radii[:, None] * dirs


def certify_truncation(zeta: Callable, M: float, kappa: SandyKappa, scale: float = 1.0,
                       dzeta: Callable | None = None, theta_grid=np.linspace(0, 1, 11),
                       n_dense: int = 4001, seed: int = 0) -> tuple[float, float]:
    """Sampled bi-Lipschitz bounds (lower, upper) of ``x + theta kappa(x/scale) zeta(x)``."""
    d = kappa.d
    fn, jac = truncated_zeta(zeta, kappa, scale, dzeta)
    pts = _certification_points(kappa.outer_radius * scale, d, kappa.inner_radius * scale, n_dense, seed)
    lo_loc, hi_loc = local_distortion(jac(pts), theta_grid)
    if d == 1:
        x, y = pts[:-1], pts[1:]
    else:
        rng = np.random.default_rng(seed + 1)
        x, y = pts, pts[rng.permutation(len(pts))]
    lo_sec, hi_sec = check_bilipschitz(fn, theta_grid, x, y)
    return min(lo_loc, lo_sec), max(hi_loc, hi_sec)


def pick_sandy_epsilon(zeta: Callable, L: float, M: float, R: float, eps0: float = 1.0,
                       scale: float = 1.0, dzeta: Callable | None = None, d: int = 1,
                       eps_min: float = 0.04, refine: int = 6) -> float:
    """Largest probed ``eps`` for which the truncated map is certified M-bi-Lipschitz.

    Starts at ``eps0``; on failure halves ``eps`` until certification succeeds,
    then bisects between the last failing and first passing values. Larger
    ``eps`` keeps the support radius ``(R + 1) e^{1/eps} + 1`` small.
    """
    if not (M > L >= 1.0):
        raise ValueError("need M > L >= 1")

    def ok(eps):
        lo, hi = certify_truncation(zeta, M, SandyKappa(R, eps, d), scale, dzeta)
        return lo >= 1.0 / M and hi <= M

    if ok(eps0):
        return float(eps0)
    bad, good = eps0, eps0 / 2
    while not ok(good):
        bad, good = good, good / 2
        if good < eps_min:
            raise SandySearchError(
                f"no eps >= {eps_min} certifies the truncated map as {M}-bi-Lipschitz"
            )
    for _ in range(refine):
        mid = 0.5 * (bad + good)
        if ok(mid):
            good = mid
        else:
            bad = mid
    return float(good)
