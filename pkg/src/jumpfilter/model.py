"""Model coefficients, finite-activity jump measures and assumption checks.

Coefficient callables follow one convention throughout the package::

    b(t, x, y)        -> (..., d)
    B(t, x, y)        -> (..., d_obs)
    sigma(t, x, y)    -> (..., d, d_w)
    rho(t, x, y)      -> (..., d, d_obs)
    eta(t, x, y, z0)  -> (..., d)
    xi(t, x, y, z1)   -> (..., d)

with ``x`` of shape ``(..., d)``, ``y`` of shape ``(..., d_obs)`` and marks of
shape ``(..., dz)``, all broadcast against each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .cutoffs import CHI_DERIVATIVE_BOUNDS, bump_quadrature, chi, radial_chi, radial_chi_gradient
from .diffeo import SandyKappa, certify_truncation, check_bilipschitz, fd_jacobian, pick_sandy_epsilon

COEFFICIENTS = ("b", "B", "sigma", "rho")
JUMP_COEFFICIENTS = ("eta", "xi")


def batch_shape(x: np.ndarray, y: np.ndarray) -> tuple[int, ...]:
    """Broadcast batch shape of a signal point array and an observation point array."""
    return np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])


@dataclass(frozen=True)
class JumpMeasure:
    """Finite measure ``sum_j w_j delta_{z_j}`` on a Euclidean or discrete mark space."""

    marks: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        marks = np.asarray(self.marks, dtype=float)
        if marks.ndim == 1:
            marks = marks[:, None]
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if marks.shape[0] != weights.shape[0]:
            raise ValueError("one weight per mark required")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def point(cls, mark, rate: float) -> "JumpMeasure":
        return cls(np.atleast_2d(np.asarray(mark, dtype=float)), [rate])

    @classmethod
    def gaussian(cls, rate: float, mean, std: float, n_nodes: int = 8) -> "JumpMeasure":
        """Gauss-Hermite atoms for ``rate * N(mean, std^2)`` marks in one dimension."""
        nodes, w = np.polynomial.hermite_e.hermegauss(n_nodes)
        w = w / w.sum()
        return cls(np.asarray(mean, dtype=float) + std * nodes[:, None] * np.ones((1, np.size(mean))),
                   rate * w)

    @property
    def mark_dim(self) -> int:
        return self.marks.shape[1]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def n_atoms(self) -> int:
        return self.weights.size

    def moment(self, r: float) -> float:
        """``int |z|^r nu(dz)``."""
        return float(self.weights @ np.linalg.norm(self.marks, axis=1) ** r)

    @property
    def mean_vector(self) -> np.ndarray:
        """``int z nu(dz)``, the compensator mean of the observation jumps."""
        return self.weights @ self.marks

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        p = self.weights / self.total_mass
        return rng.choice(self.n_atoms, size=n, p=p)

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """``sum_j w_j fn(z_j)`` for functions returning arrays."""
        total = 0.0
        for z, w in zip(self.marks, self.weights):
            total = total + w * np.asarray(fn(z))
        return total


@dataclass(frozen=True)
class Constants:
    K0: float = 1.0
    K1: float = 0.0
    K: float = 1.0
    L: float = 1.0
    lam: float = 1.0
    K_xi: float = 0.0
    K_eta: float = 0.0
    m: int = 1
    r: float | None = None
    K_r: float | None = None


def _zero_vec(dim):
    def fn(t, x, y, *z):
        shape = batch_shape(x, y)
        if z:
            shape = np.broadcast_shapes(shape, np.shape(z[0])[:-1])
        return np.zeros(shape + (dim,))
    return fn


def _zero_mat(rows, cols):
    def fn(t, x, y):
        return np.zeros(batch_shape(x, y) + (rows, cols))
    return fn


@dataclass(frozen=True)
class CoefficientSet:
    """Signal/observation coefficients, jump measures and declared constants."""

    d: int
    d_obs: int
    d_w: int
    b: Callable
    B: Callable
    sigma: Callable
    rho: Callable
    eta: Callable | None = None
    xi: Callable | None = None
    nu0: JumpMeasure | None = None
    nu1: JumpMeasure | None = None
    constants: Constants = field(default_factory=Constants)
    xi_bar: Callable | None = None
    eta_bar: Callable | None = None
    derivs: dict = field(default_factory=dict)
    support_radius: float | None = None
    jumps_depend_on_ty: bool = True
    fields_depend_on_ty: bool = True
    benign_B_zero: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    @classmethod
    def zero(cls, d: int = 1, d_obs: int = 1, d_w: int = 1, **kw) -> "CoefficientSet":
        return cls(d, d_obs, d_w, b=_zero_vec(d), B=_zero_vec(d_obs), sigma=_zero_mat(d, d_w),
                   rho=_zero_mat(d, d_obs), name=kw.pop("name", "zero"),
                   jumps_depend_on_ty=False, fields_depend_on_ty=False, benign_B_zero=True, **kw)

    def __post_init__(self):
        if self.nu1 is not None and self.nu1.mark_dim != self.d_obs:
            raise ValueError("observation jump marks must live in R^{d_obs}")
        if self.xi is not None and self.nu1 is None:
            raise ValueError("xi given without nu1")
        if self.eta is not None and self.nu0 is None:
            raise ValueError("eta given without nu0")

    def replace(self, **kw) -> "CoefficientSet":
        return replace(self, **kw)

    @property
    def has_signal_jumps(self) -> bool:
        return self.eta is not None and self.nu0 is not None and self.nu0.total_mass > 0

    @property
    def has_observation_jumps(self) -> bool:
        return self.nu1 is not None and self.nu1.total_mass > 0

    @property
    def m1(self) -> np.ndarray:
        if self.nu1 is None:
            return np.zeros(self.d_obs)
        return self.nu1.mean_vector

    def diffusion_matrix(self, t, x, y) -> np.ndarray:
        """``a = (sigma sigma^T + rho rho^T) / 2``."""
        s = self.sigma(t, x, y)
        r = self.rho(t, x, y)
        return 0.5 * (s @ np.swapaxes(s, -1, -2) + r @ np.swapaxes(r, -1, -2))

    def compensator_drift(self, t, x, y) -> np.ndarray:
        """``int eta nu0(dz) + int xi nu1(dz)`` at the given points."""
        shape = batch_shape(x, y) + (self.d,)
        out = np.zeros(shape)
        if self.has_signal_jumps:
            for z, w in zip(self.nu0.marks, self.nu0.weights):
                out = out + w * self.eta(t, x, y, z)
        if self.has_observation_jumps:
            for z, w in zip(self.nu1.marks, self.nu1.weights):
                out = out + w * self.xi(t, x, y, z)
        return out

    def call(self, name: str, t, x, y, z=None) -> np.ndarray:
        fn = getattr(self, name)
        return fn(t, x, y) if z is None else fn(t, x, y, z)

    def jacobian(self, name: str, t, x, y, z=None) -> np.ndarray:
        """Spatial Jacobian ``D_x`` of a coefficient: output shape plus a trailing ``d`` axis.

        Uses analytic derivatives from ``derivs`` when present, otherwise
        fourth-order centred differences with step 1e-4.
        """
        x = np.asarray(x, dtype=float)
        if name in self.derivs:
            fn = self.derivs[name]
            return np.asarray(fn(t, x, y) if z is None else fn(t, x, y, z), dtype=float)
        if z is None:
            return fd_jacobian(lambda xx: self.call(name, t, xx, y), x)
        return fd_jacobian(lambda xx: self.call(name, t, xx, y, z), x)

    def rhoB(self, t, x, y) -> np.ndarray:
        return np.einsum("...ik,...k->...i", self.rho(t, x, y), self.B(t, x, y))


# ---------------------------------------------------------------------------
# assumption validation


@dataclass
class SamplePlan:
    """Where to sample coefficients when estimating assumption constants."""

    x_box: tuple[float, float] = (-5.0, 5.0)
    y_box: tuple[float, float] = (-5.0, 5.0)
    n_points: int = 2000
    theta_grid: Iterable[float] = tuple(np.linspace(0.0, 1.0, 11))
    t_values: Iterable[float] = (0.0,)
    seed: int = 0
    pair_step: float = 1e-3


@dataclass
class BoundCheck:
    name: str
    declared: float
    estimated: float
    passed: bool
    kind: str = "upper"
    n_samples: int = 0


@dataclass
class AssumptionReport:
    checks: list[BoundCheck]
    slack: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> BoundCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list[BoundCheck]:
        return [c for c in self.checks if not c.passed]

    def to_text(self) -> str:
        lines = ["# constant declared estimated pass kind samples"]
        for c in self.checks:
            lines.append(f"{c.name} {c.declared:.17g} {c.estimated:.17g} "
                         f"{'pass' if c.passed else 'FAIL'} {c.kind} {c.n_samples}")
        return "\n".join(lines) + "\n"


def _upper(name, declared, estimated, slack, n):
    ok = estimated <= declared * (1 + slack) + 1e-12
    return BoundCheck(name, float(declared), float(estimated), bool(ok), "upper", n)


def _lower(name, declared, estimated, slack, n):
    ok = estimated >= declared * (1 - slack) - 1e-12
    return BoundCheck(name, float(declared), float(estimated), bool(ok), "lower", n)


def _stack_fields(c: CoefficientSet, t, x, y, fields=COEFFICIENTS) -> np.ndarray:
    shape = batch_shape(x, y)
    parts = [np.broadcast_to(c.call(f, t, x, y), shape + np.shape(c.call(f, t, x, y))[len(shape):])
             .reshape(shape + (-1,)) for f in fields]
    return np.concatenate(parts, axis=-1)


def _sample_points(c: CoefficientSet, plan: SamplePlan, rng) -> tuple[np.ndarray, np.ndarray]:
    n = plan.n_points
    x = rng.uniform(*plan.x_box, size=(n, c.d))
    if c.d == 1:
        x[: n // 2, 0] = np.linspace(*plan.x_box, n // 2)
    y = rng.uniform(*plan.y_box, size=(n, c.d_obs))
    return x, y


def _nested_derivative_norms(fn: Callable, x: np.ndarray, order: int) -> list[np.ndarray]:
    """Euclidean norms of the k-th derivative tensors for k = 1..order (nested differences)."""
    norms = []
    current = fn
    for k in range(1, order + 1):
        h = 1e-4 ** (1.0 / k)
        prev = current
        current = (lambda g, hh: (lambda xx: fd_jacobian(g, xx, hh)))(prev, h)
        val = current(x)
        lead = x.ndim - 1
        norms.append(np.sqrt(np.sum(val.reshape(val.shape[:lead] + (-1,)) ** 2, axis=-1)))
    return norms


def validate_assumptions(coeffs: CoefficientSet, sample_plan: SamplePlan | None = None,
                         slack: float = 0.05) -> AssumptionReport:
    """Estimate the model constants on samples and compare them with the declared ones.

    Violations are reported as failed checks, never raised.
    """
    plan = SamplePlan() if sample_plan is None else sample_plan
    thetas = np.asarray(list(plan.theta_grid), dtype=float)
    t_values = list(plan.t_values)
    if plan.n_points <= 1 or thetas.size == 0 or not t_values:
        raise ValueError("sample plan must contain points, theta values and times")
    c = coeffs
    k = c.constants
    rng = np.random.default_rng(plan.seed)
    checks: list[BoundCheck] = []
    est = {key: 0.0 for key in ("L", "K0", "K", "L_deriv", "rhoB_lip")}
    n = plan.n_points

    for t in t_values:
        x, y = _sample_points(c, plan, rng)
        far_x = x[rng.permutation(n)]
        far_y = y[rng.permutation(n)]
        dirs = rng.normal(size=(n, c.d + c.d_obs))
        dirs *= plan.pair_step / np.linalg.norm(dirs, axis=1, keepdims=True)
        near_x, near_y = x + dirs[:, : c.d], y + dirs[:, c.d:]
        f0 = _stack_fields(c, t, x, y)
        for x2, y2 in ((far_x, far_y), (near_x, near_y)):
            f2 = _stack_fields(c, t, x2, y2)
            dz = np.sqrt(np.sum((x - x2) ** 2, axis=1) + np.sum((y - y2) ** 2, axis=1))
            quot = 0.0
            for f in COEFFICIENTS:
                a = c.call(f, t, x, y).reshape(n, -1)
                b2 = c.call(f, t, x2, y2).reshape(n, -1)
                quot = quot + np.linalg.norm(a - b2, axis=1)
            est["L"] = max(est["L"], float(np.max(quot / dz)))
        zn = np.sqrt(np.sum(x ** 2, axis=1) + np.sum(y ** 2, axis=1))
        growth = sum(np.linalg.norm(c.call(f, t, x, y).reshape(n, -1), axis=1)
                     for f in ("b", "sigma", "rho"))
        est["K0"] = max(est["K0"], float(np.max(growth - k.K1 * zn)))
        est["K"] = max(est["K"], float(np.max(np.linalg.norm(c.B(t, x, y).reshape(n, -1), axis=1))))
        del f0

        sub = slice(0, min(n, 400))
        xs, ys = x[sub], y[sub]
        stacked = lambda xx, tt=t, yy=ys: np.concatenate(
            [_stack_fields(c, tt, xx, yy), c.rhoB(tt, xx, yy).reshape(xx.shape[0], -1)], axis=-1)
        norms = _nested_derivative_norms(stacked, xs, k.m + 1)
        est["L_deriv"] = max(est["L_deriv"], float(np.max(sum(norms))))
        rb1 = c.rhoB(t, x, y)
        rb2 = c.rhoB(t, near_x, y)
        dx = np.linalg.norm(x - near_x, axis=1)
        est["rhoB_lip"] = max(est["rhoB_lip"], float(np.max(np.linalg.norm(rb1 - rb2, axis=1) / dx)))

        for jname, nu, bar, Kbar in (("xi", c.nu1, c.xi_bar, k.K_xi), ("eta", c.nu0, c.eta_bar, k.K_eta)):
            fn = getattr(c, jname)
            if fn is None or nu is None:
                continue
            key_g, key_l, key_d, key_det, key_one, key_bar = (
                f"{jname}_growth", f"{jname}_lipschitz", f"{jname}_deriv",
                f"lambda_det_{jname}", f"lambda_onesided_{jname}", f"K_{jname}")
            for key in (key_g, key_l, key_d, key_bar):
                est.setdefault(key, 0.0)
            est.setdefault(key_det, np.inf)
            est.setdefault(key_one, np.inf)
            for z in nu.marks:
                zbar = float(bar(z)) if bar is not None else 0.0
                est[key_bar] = max(est[key_bar], zbar)
                v = fn(t, x, y, z)
                mag = np.linalg.norm(v, axis=1)
                bound = zbar * (k.K0 + k.K1 * zn)
                with np.errstate(divide="ignore", invalid="ignore"):
                    ratio = np.where(mag == 0, 0.0, mag / bound)
                est[key_g] = max(est[key_g], float(np.max(ratio)))
                v2 = fn(t, near_x, near_y, z)
                dzn = np.linalg.norm(dirs, axis=1)
                with np.errstate(divide="ignore", invalid="ignore"):
                    lq = np.linalg.norm(v - v2, axis=1) / (zbar * dzn)
                lq = np.where(np.linalg.norm(v - v2, axis=1) == 0, 0.0, lq)
                est[key_l] = max(est[key_l], float(np.max(lq)))
                jac = c.jacobian(jname, t, x, y, z)
                dets = np.abs(np.linalg.det(np.eye(c.d) + thetas[:, None, None, None] * jac[None]))
                est[key_det] = min(est[key_det], float(dets.min()))
                v_near = fn(t, near_x, y, z)
                dxx = x - near_x
                dist = np.linalg.norm(dxx, axis=1)
                v_far = fn(t, far_x, y, z)
                dxf = x - far_x
                distf = np.linalg.norm(dxf, axis=1)
                keep = distf > 0
                for th in thetas:
                    one = np.linalg.norm(dxx + th * (v - v_near), axis=1) / dist
                    two = np.linalg.norm(dxf[keep] + th * (v[keep] - v_far[keep]), axis=1) / distf[keep]
                    est[key_one] = min(est[key_one], float(one.min()), float(two.min()))
                dnorms = _nested_derivative_norms(lambda xx, zz=z, tt=t, yy=ys: fn(tt, xx, yy, zz),
                                                  xs, k.m + 1)
                with np.errstate(divide="ignore", invalid="ignore"):
                    dq = np.where(sum(dnorms) < 1e-10, 0.0, sum(dnorms) / zbar)
                est[key_d] = max(est[key_d], float(np.max(dq)))

    n_all = n * len(t_values)
    checks.append(_upper("L", k.L, est["L"], slack, n_all))
    checks.append(_upper("K0", k.K0, max(est["K0"], 0.0), slack, n_all))
    checks.append(_upper("K", k.K, est["K"], slack, n_all))
    checks.append(_upper("L_deriv", k.L, est["L_deriv"], slack, min(n, 400) * len(t_values)))
    checks.append(_upper("rhoB_lipschitz", k.L, est["rhoB_lip"], slack, n_all))
    if c.nu1 is not None:
        checks.append(_upper("nu1_second_moment", k.K0 ** 2, c.nu1.moment(2), slack, c.nu1.n_atoms))
        if k.r is not None and k.K_r is not None:
            checks.append(_upper("K_r", k.K_r, c.nu1.moment(k.r), slack, c.nu1.n_atoms))
    for jname, Kbar in (("xi", k.K_xi), ("eta", k.K_eta)):
        if f"{jname}_growth" not in est:
            continue
        checks.append(_upper(f"{jname}_growth", 1.0, est[f"{jname}_growth"], slack, n_all))
        checks.append(_upper(f"{jname}_lipschitz", 1.0, est[f"{jname}_lipschitz"], slack, n_all))
        checks.append(_upper(f"{jname}_deriv", k.L, est[f"{jname}_deriv"], slack, n_all))
        checks.append(_upper(f"K_{jname}", Kbar, est[f"K_{jname}"], slack, n_all))
        checks.append(_lower(f"lambda_det_{jname}", k.lam, est[f"lambda_det_{jname}"], slack,
                             n_all * thetas.size))
        checks.append(_lower(f"lambda_onesided_{jname}", k.lam, est[f"lambda_onesided_{jname}"],
                             slack, 2 * n_all * thetas.size))
    return AssumptionReport(checks, slack)


# ---------------------------------------------------------------------------
# truncation and mollification of coefficients


@dataclass(frozen=True)
class TruncationInfo:
    n: int
    R: float
    eps: float | None
    support_radius: float
    K0: float
    L: float


def _cut_joint(fn, jac, n):
    """``chi(|(x, y)| / n) * fn`` and its x-Jacobian."""

    def weight(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = batch_shape(x, y)
        z = np.concatenate([np.broadcast_to(x, shape + x.shape[-1:]),
                            np.broadcast_to(y, shape + y.shape[-1:])], axis=-1)
        w = radial_chi(z, n)
        gw = radial_chi_gradient(z, n)[..., : x.shape[-1]]
        return w, gw

    def val(t, x, y):
        f = np.asarray(fn(t, x, y), dtype=float)
        w, _ = weight(x, y)
        return w.reshape(w.shape + (1,) * (f.ndim - w.ndim)) * f

    def dval(t, x, y):
        f = np.asarray(fn(t, x, y), dtype=float)
        df = np.asarray(jac(t, x, y), dtype=float)
        w, gw = weight(x, y)
        extra = f.ndim - w.ndim
        wexp = w.reshape(w.shape + (1,) * (extra + 1))
        gexp = gw.reshape(gw.shape[:-1] + (1,) * extra + gw.shape[-1:])
        return wexp * df + f[..., None] * gexp

    return val, dval


def _cut_jump(fn, jac, kappa: SandyKappa, n):
    """``kappa(x / n) chi(|y| / n) * fn`` and its x-Jacobian."""

    def val(t, x, y, z):
        x = np.asarray(x, dtype=float)
        f = fn(t, x, y, z)
        w = kappa(x / n) * chi(np.linalg.norm(np.asarray(y, dtype=float), axis=-1) / n)
        return w[..., None] * f

    def dval(t, x, y, z):
        x = np.asarray(x, dtype=float)
        f = fn(t, x, y, z)
        df = jac(t, x, y, z)
        cy = chi(np.linalg.norm(np.asarray(y, dtype=float), axis=-1) / n)
        k = kappa(x / n) * cy
        gk = kappa.gradient(x / n) / n * cy[..., None]
        return k[..., None, None] * df + f[..., :, None] * gk[..., None, :]

    return val, dval


def _leibniz_bound(L: float, f0: float, n: float, m: int) -> float:
    """Bound on ``sum_{k=1}^{m+1} |D^k (chi(|.|/n) f)|`` summed over the five fields.

    Uses ``|f| <= f0 + 2 n L`` on the cutoff support and ``|D^j f| <= L``.
    """
    from math import comb

    cb = (1.0,) + CHI_DERIVATIVE_BOUNDS
    total = 0.0
    for k in range(1, m + 2):
        for j in range(k + 1):
            size = f0 + 2 * n * L if j == k else L
            total += comb(k, j) * cb[j] / n ** j * size
    return 5 * total


def truncate_coefficients(coeffs: CoefficientSet, n: int, R: float, eps: float | None = None,
                          M: float | None = None, t: float = 0.0) -> CoefficientSet:
    """Cut the coefficients off outside a ball so the support condition holds.

    ``(b, B, sigma, rho)`` are multiplied by ``chi(|(x, y)| / n)`` and the jump
    coefficients by ``kappa^R_eps(x / n) chi(|y| / n)``. When ``eps`` is None
    it is chosen per jump coefficient so that every truncated jump map stays
    ``M``-bi-Lipschitz (``M`` defaults to 1.25 times the sampled constant of
    the untruncated map).
    """
    if n < 1 or R <= 0:
        raise ValueError("need n >= 1 and R > 0")
    c = coeffs
    k = c.constants
    new = {}
    derivs = {}
    f0 = 0.0
    for name in COEFFICIENTS:
        fn = getattr(c, name)
        jac = (lambda nm: (lambda tt, xx, yy: c.jacobian(nm, tt, xx, yy)))(name)
        val, dval = _cut_joint(fn, jac, n)
        new[name], derivs[name] = val, dval
        zero_x, zero_y = np.zeros((1, c.d)), np.zeros((1, c.d_obs))
        if name != "B":
            f0 += float(np.linalg.norm(fn(t, zero_x, zero_y)))
    chosen_eps = eps
    kappa = None
    lam_new = k.lam
    jump_radius = 0.0
    if c.eta is not None or c.xi is not None:
        if chosen_eps is None:
            chosen_eps = 1.0
            y0 = np.zeros(c.d_obs)
            for name, nu in (("eta", c.nu0), ("xi", c.nu1)):
                fn = getattr(c, name)
                if fn is None:
                    continue
                for z in nu.marks:
                    zeta = (lambda f, zz: (lambda xx: f(t, xx, y0, zz)))(fn, z)
                    dzeta = (lambda nm, zz: (lambda xx: c.jacobian(nm, t, xx, y0, zz)))(name, z)
                    xs = np.linspace(-(R + 2) * n, (R + 2) * n, 4001)[:, None]
                    lo, hi = check_bilipschitz(zeta, np.linspace(0, 1, 11), xs[:-1], xs[1:]) \
                        if c.d == 1 else (1.0, 1.0)
                    Lb = max(1.0, hi, 1.0 / lo)
                    Mb = M if M is not None else 1.25 * Lb + 1e-9
                    e = pick_sandy_epsilon(zeta, Lb, max(Mb, Lb * (1 + 1e-6)), R, eps0=chosen_eps,
                                           scale=n, dzeta=dzeta, d=c.d)
                    chosen_eps = min(chosen_eps, e)
        kappa = SandyKappa(R, chosen_eps, c.d)
        jump_radius = n * kappa.outer_radius
        y0 = np.zeros(c.d_obs)
        for name, nu in (("eta", c.nu0), ("xi", c.nu1)):
            fn = getattr(c, name)
            if fn is None:
                continue
            for z in nu.marks:
                zeta = (lambda f, zz: (lambda xx: f(t, xx, y0, zz)))(fn, z)
                dzeta = (lambda nm, zz: (lambda xx: c.jacobian(nm, t, xx, y0, zz)))(name, z)
                lo, _ = certify_truncation(zeta, np.inf, kappa, n, dzeta)
                lam_new = min(lam_new, lo)
        for name in JUMP_COEFFICIENTS:
            fn = getattr(c, name)
            if fn is None:
                continue
            jac = (lambda nm: (lambda tt, xx, yy, zz: c.jacobian(nm, tt, xx, yy, zz)))(name)
            val, dval = _cut_jump(fn, jac, kappa, n)
            new[name], derivs[name] = val, dval
    extra = {}
    if kappa is not None:
        # product rule: |D(kappa chi f)| <= fbar + (|kappa'| + |chi'|) |f| / n
        growth = k.K0 + k.K1 * (jump_radius + 2 * n)
        factor = 1.0 + (kappa.lipschitz_bound + CHI_DERIVATIVE_BOUNDS[0]) * growth / n
        for bar_name, K_name in (("xi_bar", "K_xi"), ("eta_bar", "K_eta")):
            bar = getattr(c, bar_name)
            if bar is not None:
                extra[bar_name] = (lambda f: (lambda z: factor * f(z)))(bar)
                extra[K_name] = factor * getattr(k, K_name)
    radius = max(2.0 * n, jump_radius)
    K0_new = 3 * (2 * n * k.L) + f0
    K0_new = max(K0_new, k.K0 + k.K1 * (jump_radius + 2 * n))
    L_new = max(5 * k.L + 2 * f0, _leibniz_bound(k.L, f0, n, k.m))
    info = TruncationInfo(n, R, chosen_eps, radius, K0_new, L_new)
    bars = {key: val for key, val in extra.items() if key.endswith("_bar")}
    bounds = {key: val for key, val in extra.items() if key.startswith("K_")}
    return c.replace(**new, **bars, derivs=derivs, support_radius=radius,
                     constants=replace(k, K1=0.0, K0=K0_new, L=L_new, lam=lam_new, **bounds),
                     name=f"{c.name}|truncated(n={n},R={R})",
                     params={**c.params, "truncation": info})


def mollify_coefficients(coeffs: CoefficientSet, eps: float, n_nodes: int = 32) -> CoefficientSet:
    """Convolve every coefficient in ``x`` with the bump of radius ``eps``.

    Requires compactly supported coefficients (run :func:`truncate_coefficients`
    first). Declared constants are kept: averaging does not increase sup or
    Lipschitz bounds.
    """
    if not (0 < eps < 1):
        raise ValueError("eps must lie in (0, 1)")
    c = coeffs
    if c.support_radius is None:
        raise ValueError("coefficients must be compactly supported before mollification")
    nodes, weights = bump_quadrature(c.d, n_nodes)
    shifts = eps * nodes  # (J, d)

    def smooth(fn, jump: bool):
        def val(t, x, *rest):
            x = np.asarray(x, dtype=float)
            acc = 0.0
            for s, w in zip(shifts, weights):
                acc = acc + w * fn(t, x - s, *rest)
            return acc
        return val

    new = {}
    derivs = {}
    for name in COEFFICIENTS + JUMP_COEFFICIENTS:
        fn = getattr(c, name)
        if fn is None:
            continue
        jump = name in JUMP_COEFFICIENTS
        new[name] = smooth(fn, jump)
        jac = (lambda nm: (lambda t, x, y, *z: c.jacobian(nm, t, x, y, *z)))(name)
        derivs[name] = smooth(jac, jump)
    return c.replace(**new, derivs=derivs, support_radius=c.support_radius + eps,
                     name=f"{c.name}|mollified(eps={eps})")
