"""Explicit grid solver for the Zakai equation of the unnormalised filter density.

One step of size ``dt`` driven by the observed ``dV^Q`` and observation jumps::

    u <- u + dt [L* u + sum_j w0_j J*_{eta_j} u + sum_j w1_j D_i(xi_j^i u)]
           + sum_k M*_k u dV^Q_k
    u <- T*_xi u            for each observation jump in the step

with ``L* u = D_ij(a^ij u) - D_i(b^i u)``, ``a = (sigma sigma^T + rho rho^T) / 2``,
``M*_k u = -D_i(rho^ik u) + B^k u``, ``T*_zeta u = u(tau^{-1}) |det D tau^{-1}|``
and ``J*_zeta u = T*_zeta u - u + D_i(zeta^i u)``. Values outside the box are
zero (Dirichlet boundary).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .diffeo import DiffeoMap, invert
from .grid import GridDensity
from .model import CoefficientSet
from .sde_sim import ObservationRecord, n_steps_for
from .stencils import diff1, second_partial, wmp_norm

log = logging.getLogger(__name__)

CFL_LIMIT = 0.45
THETA_NODES = 8


class CFLError(ValueError):
    """Time step too large for the explicit scheme."""


class MassCollapseError(RuntimeError):
    """The unnormalised mass vanished or exploded."""


class SupportViolation(RuntimeError):
    """A jump map pushes mass outside the computational box."""


# ---------------------------------------------------------------------------
# jump-map caches


@dataclass
class PushforwardCache:
    """``tau^{-1}`` at the grid nodes and ``|det D tau^{-1}|`` there."""

    x_inv: np.ndarray
    inv_det: np.ndarray
    zeta_at_nodes: np.ndarray


def jump_map(coeffs: CoefficientSet, name: str, t: float, y: np.ndarray, z: np.ndarray,
             theta: float = 1.0) -> DiffeoMap:
    """The map ``x -> x + theta * zeta(t, x, y, z)`` for ``zeta`` = ``eta`` or ``xi``."""
    fn = getattr(coeffs, name)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    return DiffeoMap(zeta=lambda x: fn(t, x, y, z), d=coeffs.d, theta=theta,
                     dzeta=lambda x: coeffs.jacobian(name, t, x, y, z))


def pushforward_cache(m: DiffeoMap, grid: GridDensity) -> PushforwardCache:
    nodes = grid.points()
    x_inv = invert(m, nodes)
    det = np.abs(np.linalg.det(m.jacobian(x_inv)))
    return PushforwardCache(x_inv, 1.0 / det, m.zeta(nodes))


def _check_support(m: DiffeoMap, u: GridDensity, rel_tol: float = 1e-10) -> None:
    peak = np.max(np.abs(u.values))
    if peak == 0:
        return
    mask = np.abs(u.values) > rel_tol * peak
    img = m.apply(u.points()[mask])
    lo, hi = u.lower - 0.5 * u.h, u.upper + 0.5 * u.h
    if np.any(img < lo) or np.any(img > hi):
        raise SupportViolation("jump map moves mass outside the computational box; enlarge the grid")


def apply_Tstar(m: DiffeoMap, u: GridDensity, cache: PushforwardCache | None = None,
                check_support: bool = True) -> GridDensity:
    """Pushforward density ``u(tau^{-1} x) |det D tau^{-1}(x)|`` by cubic-spline interpolation."""
    if check_support:
        _check_support(m, u)
    if cache is None:
        cache = pushforward_cache(m, u)
    return u.like(u.interpolate(cache.x_inv) * cache.inv_det)


def divergence(field: np.ndarray, h: float) -> np.ndarray:
    """``sum_i D_i F^i`` for a vector field of shape ``grid.shape + (d,)``."""
    d = field.shape[-1]
    return sum(diff1(field[..., i], i, h) for i in range(d))


def apply_Istar_integral(m: DiffeoMap, u: GridDensity, n_nodes: int = THETA_NODES) -> GridDensity:
    """``-int_0^1 D_i(u(tau_th^{-1}) zeta^i(tau_th^{-1}) |det D tau_th^{-1}|) dth`` by Gauss-Legendre in theta."""
    g, w = np.polynomial.legendre.leggauss(n_nodes)
    thetas, weights = 0.5 * (g + 1), 0.5 * w
    nodes = u.points()
    out = np.zeros(u.shape)
    for th, wt in zip(thetas, weights):
        mt = m.with_theta(th * m.theta)
        x_inv = invert(mt, nodes)
        det = np.abs(np.linalg.det(mt.jacobian(x_inv)))
        flux = (u.interpolate(x_inv) / det)[..., None] * m.theta * m.zeta(x_inv)
        out -= wt * divergence(flux, u.h)
    return u.like(out)


def apply_K(m: DiffeoMap, u: GridDensity, n_nodes: int = THETA_NODES) -> np.ndarray:
    """Divergence-form fields ``K_i u`` with ``(u, J phi) = (K_i u, D_i phi)``; shape ``grid.shape + (d,)``.

    ``K_i u = int_0^1 (th - 1) D_j(g^{ij}_th) dth`` with
    ``g^{ij}_th = (u zeta^i zeta^j)(tau_th^{-1}) |det D tau_th^{-1}|``.
    """
    g, w = np.polynomial.legendre.leggauss(n_nodes)
    thetas, weights = 0.5 * (g + 1), 0.5 * w
    nodes = u.points()
    d = u.d
    out = np.zeros(u.shape + (d,))
    for th, wt in zip(thetas, weights):
        mt = m.with_theta(th * m.theta)
        x_inv = invert(mt, nodes)
        det = np.abs(np.linalg.det(mt.jacobian(x_inv)))
        zeta = m.theta * m.zeta(x_inv)
        base = u.interpolate(x_inv) / det
        for i in range(d):
            gi = base[..., None] * zeta[..., i:i + 1] * zeta  # g^{ij}, j along last axis
            out[..., i] += wt * (th - 1.0) * divergence(gi, u.h)
    return out


# ---------------------------------------------------------------------------
# operator bundle


@dataclass
class OperatorBundle:
    """Coefficient fields on the grid at one time and observation value."""

    grid: GridDensity
    t: float
    y: np.ndarray
    a: np.ndarray
    b: np.ndarray
    rho: np.ndarray
    B: np.ndarray
    xi_drift: np.ndarray
    eta_fields: list[tuple[float, np.ndarray, PushforwardCache]] = field(default_factory=list)
    eta_rate: float = 0.0

    @classmethod
    def build(cls, coeffs: CoefficientSet, grid: GridDensity, t: float = 0.0,
              y: np.ndarray | None = None) -> "OperatorBundle":
        c = coeffs
        y = np.zeros(c.d_obs) if y is None else np.asarray(y, dtype=float).reshape(c.d_obs)
        x = grid.points()
        yy = np.broadcast_to(y, grid.shape + (c.d_obs,))
        a = c.diffusion_matrix(t, x, yy)
        b = np.broadcast_to(c.b(t, x, yy), grid.shape + (c.d,)).copy()
        rho = np.broadcast_to(c.rho(t, x, yy), grid.shape + (c.d, c.d_obs)).copy()
        B = np.broadcast_to(c.B(t, x, yy), grid.shape + (c.d_obs,)).copy()
        xi_drift = np.zeros(grid.shape + (c.d,))
        if c.has_observation_jumps:
            for z, w in zip(c.nu1.marks, c.nu1.weights):
                xi_drift += w * c.xi(t, x, yy, z)
        eta_fields = []
        if c.has_signal_jumps:
            for z, w in zip(c.nu0.marks, c.nu0.weights):
                m = jump_map(c, "eta", t, y, z)
                cache = pushforward_cache(m, grid)
                eta_fields.append((float(w), cache.zeta_at_nodes, cache))
        return cls(grid, t, y, np.broadcast_to(a, grid.shape + (c.d, c.d)).copy(), b, rho, B, xi_drift,
                   eta_fields, c.nu0.total_mass if c.has_signal_jumps else 0.0)

    @property
    def max_diffusion(self) -> float:
        if self.a.size == 0:
            return 0.0
        return float(np.max(np.linalg.eigvalsh(self.a)))

    def check_psd(self, tol: float = 1e-12) -> None:
        if np.min(np.linalg.eigvalsh(self.a)) < -tol:
            raise ValueError("diffusion matrix is not positive semidefinite")


def apply_Lstar(bundle: OperatorBundle, u: GridDensity) -> GridDensity:
    """``D_ij(a^ij u) - D_i(b^i u)``."""
    g = bundle.grid
    u.require_same_grid(g)
    h, d = g.h, g.d
    out = np.zeros(g.shape)
    for i in range(d):
        for j in range(d):
            out += second_partial(bundle.a[..., i, j] * u.values, i, j, h)
        out -= diff1(bundle.b[..., i] * u.values, i, h)
    return u.like(out)


def apply_Mstar(bundle: OperatorBundle, u: GridDensity, k: int) -> GridDensity:
    """``-D_i(rho^ik u) + B^k u``."""
    g = bundle.grid
    u.require_same_grid(g)
    if not 0 <= k < bundle.B.shape[-1]:
        raise ValueError(f"observation index {k} out of range")
    out = bundle.B[..., k] * u.values
    for i in range(g.d):
        out = out - diff1(bundle.rho[..., i, k] * u.values, i, g.h)
    return u.like(out)


def apply_Jstar(bundle_or_grid, u: GridDensity, m: DiffeoMap, cache: PushforwardCache | None = None) -> GridDensity:
    """``T* u - u + D_i(zeta^i u)``."""
    if cache is None:
        cache = pushforward_cache(m, u)
    tu = apply_Tstar(m, u, cache)
    flux = u.values[..., None] * cache.zeta_at_nodes
    return u.like(tu.values - u.values + divergence(flux, u.h))


def jump_drift(bundle: OperatorBundle, u: GridDensity) -> np.ndarray:
    """Compensator terms: ``sum w0 J*_eta u + D_i(int xi dnu1 ^i u)``."""
    out = divergence(u.values[..., None] * bundle.xi_drift, u.h)
    for w, zeta, cache in bundle.eta_fields:
        tu = u.interpolate(cache.x_inv) * cache.inv_det
        out += w * (tu - u.values + divergence(u.values[..., None] * zeta, u.h))
    return out


def check_cfl(bundle: OperatorBundle, coeffs: CoefficientSet, dt: float) -> None:
    """Reject steps violating ``a dt / h^2 <= 0.45`` or the mean-square bound ``4 a^2 dt / h^2 <= 2a - |rho|^2``."""
    h2 = bundle.grid.h ** 2
    amax = bundle.max_diffusion
    if amax * dt / h2 > CFL_LIMIT:
        raise CFLError(f"CFL violated: a dt / h^2 = {amax * dt / h2:.3f} > {CFL_LIMIT}")
    rho2 = np.sum(bundle.rho ** 2, axis=-1)  # per signal coordinate
    for i in range(bundle.grid.d):
        aii = bundle.a[..., i, i]
        margin = 2 * aii - rho2[..., i]
        need = 4 * aii ** 2 * dt / h2
        active = rho2[..., i] > 0
        if np.any(need[active] > margin[active] + 1e-14):
            raise CFLError("mean-square stability violated: 4 a^2 dt / h^2 exceeds 2a - |rho|^2; reduce dt")


def step(u: GridDensity, bundle: OperatorBundle, dVQ: np.ndarray, jumps: Iterable, dt: float,
         coeffs: CoefficientSet, jump_cache: dict | None = None) -> GridDensity:
    """Advance ``u`` by one explicit step followed by the observed jump pushforwards.

    ``jumps`` holds ``(time, mark, y_left)`` triples in time order.
    """
    dVQ = np.asarray(dVQ, dtype=float).reshape(-1)
    drift = apply_Lstar(bundle, u).values + jump_drift(bundle, u)
    new = u.values + dt * drift
    for k in range(dVQ.size):
        if dVQ[k] != 0:
            new = new + apply_Mstar(bundle, u, k).values * dVQ[k]
    out = u.like(new, t=u.t + dt)
    for tj, z, y_left in jumps:
        m = jump_map(coeffs, "xi", tj, y_left, z)
        key = None
        if jump_cache is not None and not coeffs.jumps_depend_on_ty:
            key = np.asarray(z, dtype=float).tobytes()
        cache = jump_cache.get(key) if key is not None else None
        if cache is None:
            cache = pushforward_cache(m, out)
            if key is not None:
                jump_cache[key] = cache
        out = apply_Tstar(m, out, cache)
    return out


# ---------------------------------------------------------------------------
# driver


@dataclass
class ZakaiResult:
    times: np.ndarray
    mass: np.ndarray
    gamma_o: np.ndarray
    min_u: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    norms: dict[tuple[int, int], np.ndarray]
    snapshots: dict[float, GridDensity]
    u_T: GridDensity
    trajectory: list[GridDensity] | None = None

    @property
    def pi_T(self) -> GridDensity:
        return self.u_T.like(self.u_T.values / self.u_T.integral())

    def to_csv(self, path: str | Path) -> None:
        keys = sorted(self.norms)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mass", "gamma_o", "min_u", "mean", "var"] + [f"W{m}_{p}" for m, p in keys])
            for k, t in enumerate(self.times):
                row = [t, self.mass[k], self.gamma_o[k], self.min_u[k], self.mean[k], self.var[k]]
                row += [self.norms[key][k] for key in keys]
                w.writerow([f"{v:.17g}" for v in row])


def default_radius(coeffs: CoefficientSet, support_radius: float, T: float, amax: float | None = None) -> float:
    """Box half-width ``R_bar + 6 sqrt(max a * T)``."""
    if amax is None:
        x = np.linspace(-support_radius, support_radius, 201)[:, None]
        a = coeffs.diffusion_matrix(0.0, x, np.zeros((1, coeffs.d_obs)))
        amax = float(np.max(np.linalg.eigvalsh(a))) if a.size else 0.0
    return support_radius + 6.0 * math.sqrt(max(amax, 0.0) * T)


def solve(coeffs: CoefficientSet, pi0: GridDensity, obs: ObservationRecord, T: float | None = None,
          dt: float | None = None, snapshot_times: Iterable[float] = (), norm_orders: Iterable[tuple[int, int]] = (),
          keep_trajectory: bool = False, record_every: int = 1) -> ZakaiResult:
    """Integrate from ``pi0`` over the observation record.

    ``obs.dt`` must equal ``dt``; coarsen the record first for larger steps.
    """
    dt = obs.dt if dt is None else dt
    if not math.isclose(dt, obs.dt, rel_tol=1e-12):
        raise ValueError("solver step must equal the observation record step")
    T = obs.T if T is None else T
    n = n_steps_for(T, dt)
    if n > obs.n_steps:
        raise ValueError("observation record shorter than the horizon")
    mass0 = pi0.integral()
    if np.min(pi0.values) < 0 or abs(mass0 - 1.0) > 1e-8:
        raise ValueError(f"initial density must be nonnegative with unit mass (mass {mass0:.12g})")
    c = coeffs
    norm_orders = list(norm_orders)
    snaps_wanted = sorted(snapshot_times)
    u = pi0.copy()
    u.t = 0.0
    bundle = OperatorBundle.build(c, u, 0.0, obs.Y[0])
    bundle.check_psd()
    check_cfl(bundle, c, dt)
    jump_cache: dict = {}
    rec_idx = list(range(0, n + 1, record_every))
    if rec_idx[-1] != n:
        rec_idx.append(n)
    rec = {"t": [], "mass": [], "go": [], "min": [], "mean": [], "var": []}
    norms = {key: [] for key in norm_orders}
    snaps: dict[float, GridDensity] = {}
    traj = [u.copy()] if keep_trajectory else None
    xs = u.points()[..., 0]

    def record(k, u):
        mass = u.integral()
        if not np.isfinite(mass) or mass <= 1e-300 or mass > 1e300:
            raise MassCollapseError(f"unnormalised mass {mass!r} at t={k * dt:.6g}")
        rec["t"].append(k * dt)
        rec["mass"].append(mass)
        rec["go"].append(1.0 / mass)
        rec["min"].append(float(u.values.min()))
        mu = u.integrate(xs) / mass
        rec["mean"].append(mu)
        rec["var"].append(u.integrate((xs - mu) ** 2) / mass)
        for key in norm_orders:
            norms[key].append(wmp_norm(u, key[0], key[1]))

    record(0, u)
    next_rec = 1
    for k in range(n):
        t = k * dt
        if c.fields_depend_on_ty and k > 0:
            bundle = OperatorBundle.build(c, u, t, obs.Y[k])
        u = step(u, bundle, obs.dVQ[k], obs.jumps_in_step(k), dt, c, jump_cache)
        u.t = (k + 1) * dt
        if keep_trajectory:
            traj.append(u.copy())
        while snaps_wanted and snaps_wanted[0] <= u.t + 1e-12:
            snaps[snaps_wanted.pop(0)] = u.copy()
        if next_rec < len(rec_idx) and rec_idx[next_rec] == k + 1:
            record(k + 1, u)
            next_rec += 1
        elif not np.isfinite(u.values[u.values.size // 2 if u.d == 1 else 0].sum()):
            raise MassCollapseError(f"non-finite density at t={u.t:.6g}")
    mins = np.array(rec["min"])
    if mins.min() < 0:
        log.info("minimum density value %.3e (negative undershoot, not clipped)", mins.min())
    return ZakaiResult(np.array(rec["t"]), np.array(rec["mass"]), np.array(rec["go"]), mins,
                       np.array(rec["mean"]), np.array(rec["var"]),
                       {key: np.array(v) for key, v in norms.items()}, snaps, u, traj)
