"""Mollified estimate functionals, the Itô balance of ``|D^a u^(eps)|_p^p`` and norm ladders.

Every functional is evaluated from its mollified-quantity form on a grid:
``D^a (L* u)^(eps)`` is obtained by convolving ``u`` (times a coefficient)
with a derivative of the Gaussian kernel, e.g.
``D^a ((a D^2)* u)^(eps) = D^{a+2} (a u)^(eps)`` and
``D^a ((s D)* u)^(eps) = -D^{a+1} (s u)^(eps)``.
Jump terms use the kernel evaluated at ``x - tau(y)``.

Scope is one space dimension, even ``p`` and ``|alpha| <= 1``.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .cutoffs import chi
from .diffeo import DiffeoMap
from .grid import GridDensity, gaussian_density
from .model import CoefficientSet
from .mollify import COVERAGE_SIGMAS, IDENTITY, JumpOperator, adjoint_mollify, mollify
from .sde_sim import ObservationRecord, n_steps_for
from .stencils import wmp_norm
from .zakai import (OperatorBundle, apply_Lstar, apply_Mstar, apply_Tstar, check_cfl, divergence,
                    jump_map, pushforward_cache, step)

__all__ = [
    "EPS_LADDER", "wmp_norm", "padded_grid", "functional_dpe1", "dpe1_terms", "functional_pe5",
    "functional_dpe3", "dpe3_terms", "functional_dpe4", "FunctionalReport", "ladder_report",
    "TestTriple", "builtin_triples", "wide_kernel_triple", "run_harness", "NormLadder", "mollified_norm_ladder",
    "ItoBalance", "ito_balance", "ITO_TERMS", "convexity_remainder", "write_reports",
]

EPS_LADDER = (0.5, 0.1, 0.02, 0.004)

Field = Callable[[np.ndarray], np.ndarray]


def _check_args(u: GridDensity, alpha: int, p: int) -> None:
    if u.d != 1:
        raise ValueError("estimate functionals are implemented for d = 1")
    if alpha not in (0, 1):
        raise ValueError("multi-index order must be 0 or 1")
    if p < 2 or p % 2:
        raise ValueError("p must be an even integer >= 2")


def padded_grid(u: GridDensity, eps: float, extra: float = 0.0) -> GridDensity:
    """Zero grid aligned with ``u``, widened by ``6 sqrt(eps) + extra`` plus two nodes per side."""
    n_pad = int(math.ceil((COVERAGE_SIGMAS * math.sqrt(eps) + extra) / u.h)) + 2
    shape = tuple(s + 2 * n_pad for s in u.shape)
    return GridDensity(np.zeros(shape), u.lower - n_pad * u.h, u.h, u.t)


def _field_values(fn: Field, u: GridDensity) -> np.ndarray:
    return np.broadcast_to(np.asarray(fn(u.points()), dtype=float).reshape(u.shape[:1] + (-1,))[..., 0],
                           u.shape)


def _moll(f: GridDensity, eps: float, out: GridDensity, order: int) -> np.ndarray:
    return mollify(f, eps, grid=out, order=order).values


def _as_map(zeta: DiffeoMap | Field) -> DiffeoMap:
    return zeta if isinstance(zeta, DiffeoMap) else DiffeoMap(zeta=zeta, d=1)


def _jump_extent(m: DiffeoMap, u: GridDensity) -> float:
    return float(np.max(np.abs(m.theta * m.zeta(u.points())))) if u.values.size else 0.0


def convexity_remainder(a: np.ndarray, b: np.ndarray, p: int) -> np.ndarray:
    """``(a + b)^p - a^p - p a^{p-1} b`` written without cancellation; nonnegative for even ``p``."""
    if p == 2:
        return b * b
    if p == 4:
        return b * b * (2 * a * a + (2 * a + b) ** 2)
    return sum(math.comb(p, k) * a ** (p - k) * b ** k for k in range(2, p + 1))


def _ip(out: GridDensity, *factors: np.ndarray) -> float:
    prod = factors[0]
    for f in factors[1:]:
        prod = prod * f
    return float(np.sum(prod) * out.cell_volume)


# ---------------------------------------------------------------------------
# diffusion and drift functionals


def dpe1_terms(u: GridDensity, sigma: Field, eps: float, alpha: int = 0, p: int = 2) -> tuple[float, float]:
    """The two summands of ``A^alpha`` for ``a = sigma^2 / 2``.

    First: ``p ((v)^{p-1}, D^a ((a D^2)* u)^(eps))``; second:
    ``p(p-1)/2 ((v)^{p-2}, (D^a ((sigma D)* u)^(eps))^2)`` with ``v = D^a u^(eps)``.
    """
    _check_args(u, alpha, p)
    out = padded_grid(u, eps)
    s = _field_values(sigma, u)
    v = _moll(u, eps, out, alpha)
    au = _moll(u.like(0.5 * s * s * u.values), eps, out, alpha + 2)
    su = -_moll(u.like(s * u.values), eps, out, alpha + 1)
    first = p * _ip(out, v ** (p - 1), au)
    square = 0.5 * p * (p - 1) * _ip(out, v ** (p - 2), su * su)
    return first, square


def functional_dpe1(u: GridDensity, sigma: Field, eps: float, alpha: int = 0, p: int = 2) -> float:
    first, square = dpe1_terms(u, sigma, eps, alpha, p)
    return first + square


def functional_pe5(u: GridDensity, sigma: Field, b: Field, eps: float, alpha: int = 0,
                   p: int = 2) -> tuple[float, float]:
    """``F = ((v)^{p-2} D^a (b u)^(eps), D^a (b u)^(eps))`` and
    ``R = ((v)^{p-2}, D^a ((sigma D)* u)^(eps) D^a (b u)^(eps))``."""
    _check_args(u, alpha, p)
    out = padded_grid(u, eps)
    v = _moll(u, eps, out, alpha)
    bu = _moll(u.like(_field_values(b, u) * u.values), eps, out, alpha)
    su = -_moll(u.like(_field_values(sigma, u) * u.values), eps, out, alpha + 1)
    w = v ** (p - 2)
    return _ip(out, w, bu, bu), _ip(out, w, su, bu)


# ---------------------------------------------------------------------------
# jump functionals


def _jump_parts(u: GridDensity, m: DiffeoMap, eps: float, alpha: int) -> tuple[GridDensity, np.ndarray, np.ndarray, np.ndarray]:
    """Output grid, ``v``, ``D^a (I* u)^(eps)`` and ``D^a (J* u)^(eps)`` by the kernel route."""
    out = padded_grid(u, eps, extra=_jump_extent(m, u))
    zeta = lambda x: m.theta * m.zeta(x)  # noqa: E731
    # same node-mass sum as the jump terms, so constant shifts cancel exactly
    v = adjoint_mollify(IDENTITY, u, eps, grid=out, order=alpha).values
    w_i = adjoint_mollify(JumpOperator("I", zeta), u, eps, grid=out, order=alpha).values
    w_j = adjoint_mollify(JumpOperator("J", zeta), u, eps, grid=out, order=alpha).values
    return out, v, w_i, w_j


def dpe3_terms(u: GridDensity, zeta: DiffeoMap | Field, eps: float, alpha: int = 0,
               p: int = 2) -> tuple[float, float]:
    """``p ((v)^{p-1}, D^a (J* u)^(eps))`` and the convexity remainder
    ``int (v + w)^p - v^p - p v^{p-1} w`` with ``w = D^a (I* u)^(eps)``."""
    _check_args(u, alpha, p)
    out, v, w_i, w_j = _jump_parts(u, _as_map(zeta), eps, alpha)
    first = p * _ip(out, v ** (p - 1), w_j)
    return first, float(np.sum(convexity_remainder(v, w_i, p)) * out.cell_volume)


def functional_dpe3(u: GridDensity, zeta: DiffeoMap | Field, eps: float, alpha: int = 0,
                    p: int = 2) -> tuple[float, float]:
    """``(C, ((v)^{p-1}, D^a (J* u)^(eps)))``: both summands of ``C`` and its J-only part."""
    first, remainder = dpe3_terms(u, zeta, eps, alpha, p)
    return first + remainder, first / p


def functional_dpe4(u: GridDensity, zeta: DiffeoMap | Field, eps: float, alpha: int = 0, p: int = 2,
                    route: str = "kernel") -> float:
    """``|int (v + D^a (I* u)^(eps))^p - v^p dx|``.

    ``route="kernel"`` moves the kernel (``k(x - tau(y))``); ``route="pushforward"``
    mollifies the interpolated pushforward density ``T* u`` instead.
    """
    _check_args(u, alpha, p)
    m = _as_map(zeta)
    if route == "kernel":
        out, v, w_i, _ = _jump_parts(u, m, eps, alpha)
        total = v + w_i
    elif route == "pushforward":
        out = padded_grid(u, eps, extra=_jump_extent(m, u))
        v = _moll(u, eps, out, alpha)
        total = _moll(apply_Tstar(m, u), eps, out, alpha)
    else:
        raise ValueError(f"unknown route {route!r}")
    return abs(float(np.sum(total ** p - v ** p) * out.cell_volume))


# ---------------------------------------------------------------------------
# reports


@dataclass
class FunctionalReport:
    """Values of one functional across an eps ladder, normalised by ``|u|^p_{W^m_p}``."""

    name: str
    eps: tuple[float, ...]
    values: np.ndarray
    reference: float
    scale: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.name}: non-finite functional values")

    @property
    def ratios(self) -> np.ndarray:
        return np.abs(self.values) / (self.scale * self.reference)

    @property
    def n_hat(self) -> float:
        return float(np.max(self.ratios))

    @property
    def bounded(self) -> bool:
        """Ratio at the smallest eps is at most twice the ratio at the largest eps plus one."""
        r = self.ratios
        lo, hi = int(np.argmin(self.eps)), int(np.argmax(self.eps))
        return bool(r[lo] <= 2.0 * r[hi] + 1.0)

    def rows(self) -> list[list]:
        return [[self.name, e, v, self.reference, r] for e, v, r in zip(self.eps, self.values, self.ratios)]

    def to_csv(self, path: str | Path) -> None:
        write_reports([self], path)


def write_reports(reports: Iterable[FunctionalReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["functional", "eps", "value", "reference_norm", "ratio"])
        for rep in reports:
            for name, *nums in rep.rows():
                w.writerow([name] + [f"{x:.17g}" for x in nums])


def ladder_report(name: str, fn: Callable[[float], float], u: GridDensity, m: int, p: int,
                  eps_list: Sequence[float] = EPS_LADDER, scale: float = 1.0, threads: int = 1) -> FunctionalReport:
    eps_list = tuple(float(e) for e in eps_list)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            values = list(pool.map(fn, eps_list))
    else:
        values = [fn(e) for e in eps_list]
    return FunctionalReport(name, eps_list, np.array(values), wmp_norm(u, m, p) ** p, scale)


@dataclass
class TestTriple:
    """A density with coefficient fields for exercising every functional."""

    __test__ = False  # not a pytest class

    name: str
    u: GridDensity
    sigma: Field
    b: Field
    zeta: Field
    xi_bar: float
    p: int
    alpha: int


def _bump_mixture(h: float, radius: float, parts: Sequence[tuple[float, float, float]]) -> GridDensity:
    """Unit-mass sum of Gaussians ``w N(c, s)`` cut smoothly to ``|x| < radius``."""
    def fn(x):
        val = sum(w * gaussian_density(x, s, c) for w, c, s in parts)
        return val * chi(2.0 * x[..., 0] / radius)
    g = GridDensity.on_box(radius + 1.0, h, fn=fn)
    return g.like(g.values / g.integral())


def builtin_triples(h: float = 0.005) -> list[TestTriple]:
    """Three fixed (u, coefficients, p) combinations used by the harness.

    All share ``sigma = zeta = sin(x) / 2`` and ``b = tanh(x - 1/2)``.
    """
    sine = lambda x: 0.5 * np.sin(x[..., 0])  # noqa: E731
    jump = lambda x: 0.5 * np.sin(x)  # noqa: E731
    drift = lambda x: np.tanh(x[..., 0] - 0.5)  # noqa: E731
    gauss = _bump_mixture(h, 8.0, [(1.0, 0.0, 1.0)])
    bimodal = _bump_mixture(h, 8.0, [(0.6, -1.5, 0.4), (0.4, 1.0, 0.3)])
    return [
        TestTriple("gauss_p2", gauss, sine, drift, jump, xi_bar=0.5, p=2, alpha=0),
        TestTriple("gauss_p2_grad", gauss, sine, drift, jump, xi_bar=0.5, p=2, alpha=1),
        TestTriple("bimodal_p4", bimodal, sine, drift, jump, xi_bar=0.5, p=4, alpha=0),
    ]


def wide_kernel_triple(h: float = 0.005) -> TestTriple:
    """``N(0,1)`` at ``p = 4``: the top of the eps ladder flattens ``v`` strongly here."""
    t = builtin_triples(h)[0]
    return TestTriple("gauss_p4", t.u, t.sigma, t.b, t.zeta, t.xi_bar, p=4, alpha=0)


def run_harness(triples: Sequence[TestTriple] | None = None, eps_list: Sequence[float] = EPS_LADDER,
                threads: int = 1) -> list[FunctionalReport]:
    """Every functional on every triple across the eps ladder."""
    triples = builtin_triples() if triples is None else triples
    reports = []
    for tt in triples:
        u, a, p, m = tt.u, tt.alpha, tt.p, tt.alpha
        tag = tt.name
        reports += [
            ladder_report(f"A/{tag}", lambda e: functional_dpe1(u, tt.sigma, e, a, p), u, m, p, eps_list,
                          threads=threads),
            ladder_report(f"pe5_F/{tag}", lambda e: functional_pe5(u, tt.sigma, tt.b, e, a, p)[0], u, m, p,
                          eps_list, threads=threads),
            ladder_report(f"pe5_R/{tag}", lambda e: functional_pe5(u, tt.sigma, tt.b, e, a, p)[1], u, m, p,
                          eps_list, threads=threads),
            ladder_report(f"C/{tag}", lambda e: functional_dpe3(u, tt.zeta, e, a, p)[0], u, m, p, eps_list,
                          scale=tt.xi_bar ** 2, threads=threads),
            ladder_report(f"F/{tag}", lambda e: functional_dpe4(u, tt.zeta, e, a, p), u, m, p, eps_list,
                          scale=tt.xi_bar, threads=threads),
        ]
    return reports


# ---------------------------------------------------------------------------
# norm ladder


@dataclass
class NormLadder:
    eps: tuple[float, ...]
    norms: np.ndarray
    reference: float

    @property
    def monotone(self) -> bool:
        """Norms do not decrease as eps decreases (up to rounding)."""
        order = np.argsort(self.eps)[::-1]
        seq = self.norms[order]
        return bool(np.all(np.diff(seq) >= -1e-12 * max(1.0, abs(self.reference))))

    @property
    def dominated(self) -> bool:
        return bool(np.all(self.norms <= self.reference * (1 + 1e-12)))


def mollified_norm_ladder(u: GridDensity, eps_list: Sequence[float] = EPS_LADDER, m: int = 0,
                          p: float = 2) -> NormLadder:
    """``|u^(eps)|_{W^m_p}`` for each eps, with the same difference stencils as ``|u|_{W^m_p}``."""
    eps_list = tuple(float(e) for e in eps_list)
    ref = wmp_norm(u, m, p)
    norms = []
    for e in eps_list:
        out = padded_grid(u, e)
        norms.append(wmp_norm(mollify(u, e, grid=out), m, p))
    return NormLadder(eps_list, np.array(norms), ref)


# ---------------------------------------------------------------------------
# Itô balance along the explicit solver

ITO_TERMS = ("L", "M", "MM", "J_eta", "J_xi", "I_xi_tilde", "jump_remainder")


@dataclass
class ItoBalance:
    """Running sides of the Itô expansion of ``|D^a u^(eps)_t|^p_p`` along a solver trajectory.

    ``terms[name][n]`` is the integral up to ``times[n]``; ``residual`` is
    ``lhs - lhs[0] - sum(terms)``.
    """

    times: np.ndarray
    lhs: np.ndarray
    terms: dict[str, np.ndarray]
    residual: np.ndarray
    u_T: GridDensity
    n_jumps: int = 0

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residual)))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "lhs"] + list(ITO_TERMS) + ["residual"])
            for n, t in enumerate(self.times):
                row = [t, self.lhs[n]] + [self.terms[k][n] for k in ITO_TERMS] + [self.residual[n]]
                w.writerow([f"{x:.17g}" for x in row])


@dataclass
class _Smoother:
    """``v = D^a u^(eps)`` on a fixed padded grid."""

    eps: float
    alpha: int
    out: GridDensity

    def __call__(self, f: GridDensity) -> np.ndarray:
        return _moll(f, self.eps, self.out, self.alpha)


def _xi_cache(coeffs: CoefficientSet, t: float, y, z, grid: GridDensity, store: dict):
    m = jump_map(coeffs, "xi", t, y, z)
    key = None if coeffs.jumps_depend_on_ty else np.asarray(z, dtype=float).tobytes()
    cache = store.get(key) if key is not None else None
    if cache is None:
        cache = pushforward_cache(m, grid)
        if key is not None:
            store[key] = cache
    return m, cache


def ito_balance(coeffs: CoefficientSet, pi0: GridDensity, obs: ObservationRecord, eps: float,
                alpha: int = 0, p: int = 2, T: float | None = None) -> ItoBalance:
    """Integrate the solver over ``obs`` and accumulate every term of the Itô expansion.

    The expansion is written against ``dV^Q`` with the solver's ``L*`` (no
    ``beta`` terms); the two forms agree because ``dV^Q = dV + B(X) dt``.
    Time integrals are left-point Riemann sums, the stochastic integral is
    the Itô sum, and each observed jump contributes its exact ``N_1`` terms.
    """
    _check_args(pi0, alpha, p)
    c = coeffs
    dt = obs.dt
    T = obs.T if T is None else T
    n = n_steps_for(T, dt)
    if n > obs.n_steps:
        raise ValueError("observation record shorter than the horizon")
    u = pi0.copy()
    u.t = 0.0
    out = padded_grid(u, eps)
    smooth = _Smoother(eps, alpha, out)
    phi = lambda vals: float(np.sum(vals ** p) * out.cell_volume)  # noqa: E731

    bundle = OperatorBundle.build(c, u, 0.0, obs.Y[0])
    bundle.check_psd()
    check_cfl(bundle, c, dt)
    comp_cache: dict = {}
    jump_cache: dict = {}
    acc = {k: 0.0 for k in ITO_TERMS}
    series = {k: [0.0] for k in ITO_TERMS}
    v = smooth(u)
    lhs = [phi(v)]
    n_jumps = 0
    for k in range(n):
        t = k * dt
        if c.fields_depend_on_ty and k > 0:
            bundle = OperatorBundle.build(c, u, t, obs.Y[k])
        vp1 = v ** (p - 1)
        acc["L"] += p * _ip(out, vp1, smooth(apply_Lstar(bundle, u))) * dt
        dVQ = np.asarray(obs.dVQ[k], dtype=float).reshape(-1)
        vp2 = v ** (p - 2)
        for j in range(c.d_obs):
            mk = smooth(apply_Mstar(bundle, u, j))
            acc["M"] += p * _ip(out, vp1, mk) * dVQ[j]
            acc["MM"] += 0.5 * p * (p - 1) * _ip(out, vp2, mk * mk) * dt
        for w, zeta, cache in bundle.eta_fields:
            tu = u.interpolate(cache.x_inv) * cache.inv_det
            jv = tu - u.values + divergence(u.values[..., None] * zeta, u.h)
            acc["J_eta"] += p * w * _ip(out, vp1, smooth(u.like(jv))) * dt
        if c.has_observation_jumps:
            for z, w in zip(c.nu1.marks, c.nu1.weights):
                m, cache = _xi_cache(c, t, obs.Y[k], z, u, comp_cache)
                iv = apply_Tstar(m, u, cache, check_support=False).values - u.values
                jv = iv + divergence(u.values[..., None] * cache.zeta_at_nodes, u.h)
                acc["J_xi"] += p * w * _ip(out, vp1, smooth(u.like(jv))) * dt
                acc["I_xi_tilde"] -= p * w * _ip(out, vp1, smooth(u.like(iv))) * dt

        u_next = step(u, bundle, obs.dVQ[k], (), dt, c)
        jumps = obs.jumps_in_step(k)
        if jumps:
            vm = smooth(u_next)
            for tj, z, y_left in jumps:
                m, cache = _xi_cache(c, tj, y_left, z, u_next, jump_cache)
                after = apply_Tstar(m, u_next, cache)
                va = smooth(after)
                wv = va - vm
                acc["I_xi_tilde"] += p * _ip(out, vm ** (p - 1), wv)
                acc["jump_remainder"] += float(np.sum(convexity_remainder(vm, wv, p)) * out.cell_volume)
                u_next, vm = after, va
                n_jumps += 1
        u = u_next
        u.t = (k + 1) * dt
        v = smooth(u)
        lhs.append(phi(v))
        for key in ITO_TERMS:
            series[key].append(acc[key])

    lhs_arr = np.array(lhs)
    terms = {key: np.array(val) for key, val in series.items()}
    residual = lhs_arr - lhs_arr[0] - sum(terms.values())
    return ItoBalance(np.arange(n + 1) * dt, lhs_arr, terms, residual, u, n_jumps)
