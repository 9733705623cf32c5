"""Weighted particle approximation of the unnormalised conditional distribution.

Particles move under the reference measure driven by the observed ``dV^Q``::

    dX = (b - rho B - int eta dnu0 - int xi dnu1) dt + sigma dW + rho dV^Q

with private signal jumps and the observed jumps ``X += xi(t, X-, Y-, z)``
applied to every particle. Log-weights accumulate
``B . dV^Q - |B|^2 dt / 2`` at the left-point positions, so that
``mu_t(phi) = exp(log_mass) * mean(exp(logw) * phi(X))``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .grid import GridDensity
from .model import CoefficientSet
from .mollify import PointMeasure, mollify
from .sde_sim import ObservationRecord, continuous_increment, guard


class DegenerateWeightsError(RuntimeError):
    """All particle weights vanished."""


@dataclass
class ParticleEnsemble:
    positions: np.ndarray
    logw: np.ndarray
    log_mass: float = 0.0
    t: float = 0.0
    prev_positions: np.ndarray | None = None
    n_resamples: int = 0

    @classmethod
    def from_positions(cls, positions: np.ndarray, t: float = 0.0) -> "ParticleEnsemble":
        pos = np.asarray(positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        return cls(pos.copy(), np.zeros(pos.shape[0]), 0.0, t)

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    def normalized_weights(self) -> np.ndarray:
        lw = self.logw
        if np.any(np.isnan(lw)) or np.any(lw == np.inf) or not np.isfinite(lw.max()):
            raise DegenerateWeightsError("log-weights are NaN, +inf or all -inf")
        w = np.exp(self.logw - self.logw.max())
        return w / w.sum()

    def ess(self) -> float:
        w = self.normalized_weights()
        return float(1.0 / np.sum(w ** 2))

    def log_total_mass(self) -> float:
        """``log mu_t(1)``."""
        lmax = self.logw.max()
        if not np.isfinite(lmax):
            raise DegenerateWeightsError("zero total mass")
        return float(self.log_mass + lmax + np.log(np.mean(np.exp(self.logw - lmax))))


def propagate(ens: ParticleEnsemble, coeffs: CoefficientSet, dVQ: np.ndarray, jumps, dt: float,
              rng: np.random.Generator, y: np.ndarray | None = None) -> ParticleEnsemble:
    """One step of the particle motion under the reference measure.

    ``jumps`` holds the observed ``(time, mark, y_left)`` triples of the step;
    ``y`` is the observation at the left end of the step.
    """
    c = coeffs
    M = ens.size
    x = ens.positions
    t = ens.t
    y = np.zeros(c.d_obs) if y is None else np.asarray(y, dtype=float).reshape(c.d_obs)
    yy = np.broadcast_to(y, (M, c.d_obs))
    dVQ = np.asarray(dVQ, dtype=float).reshape(c.d_obs)
    dW = rng.standard_normal((M, c.d_w)) * np.sqrt(dt)
    shift = -c.rhoB(t, x, yy)
    x_new = x + continuous_increment(c, t, x, yy, dt, dW, np.broadcast_to(dVQ, (M, c.d_obs)), shift)
    events = [(float(tj), -1, np.asarray(z, float), np.asarray(yl, float)) for tj, z, yl in jumps]
    if c.has_signal_jumps:
        counts = rng.poisson(c.nu0.total_mass * dt, size=M)
        for i in np.flatnonzero(counts):
            for tp in np.sort(t + dt * rng.uniform(size=counts[i])):
                z = c.nu0.marks[c.nu0.sample_indices(rng, 1)[0]]
                events.append((float(tp), int(i), z, y))
    events.sort(key=lambda e: e[0])
    for tj, who, z, yl in events:
        if who < 0:
            x_new = x_new + c.xi(tj, x_new, np.broadcast_to(yl, (M, c.d_obs)), z)
        else:
            xi_ = x_new[who:who + 1]
            x_new[who] = (xi_ + c.eta(tj, xi_, yl[None], z))[0]
    guard(x_new)
    ens.prev_positions = x
    ens.positions = x_new
    ens.t = t + dt
    return ens


def update_weights(ens: ParticleEnsemble, coeffs: CoefficientSet, dVQ: np.ndarray, dt: float,
                   y: np.ndarray | None = None) -> ParticleEnsemble:
    """``log w += B . dV^Q - |B|^2 dt / 2`` at the positions before the last propagation."""
    c = coeffs
    x = ens.prev_positions if ens.prev_positions is not None else ens.positions
    y = np.zeros(c.d_obs) if y is None else np.asarray(y, dtype=float).reshape(c.d_obs)
    Bv = c.B(ens.t - dt, x, np.broadcast_to(y, (x.shape[0], c.d_obs)))
    dVQ = np.asarray(dVQ, dtype=float).reshape(c.d_obs)
    ens.logw = ens.logw + Bv @ dVQ - 0.5 * np.sum(Bv ** 2, axis=1) * dt
    return ens


@dataclass
class Estimate:
    mu_phi: float
    mu_one: float
    gamma_o: float
    P_phi: float
    density: GridDensity | None = None


def estimate(ens: ParticleEnsemble, phi: Callable[[np.ndarray], np.ndarray] | None = None,
             grid: GridDensity | None = None, eps: float | None = None) -> Estimate:
    """``mu_t(phi)``, ``mu_t(1)``, ``1 / mu_t(1)``, ``P_t(phi)`` and optionally the mollified density of ``P_t``."""
    w = ens.normalized_weights()
    log_one = ens.log_total_mass()
    mu_one = float(np.exp(log_one))
    if phi is None:
        p_phi = 1.0
    else:
        p_phi = float(w @ np.asarray(phi(ens.positions), dtype=float).reshape(ens.size))
    mu_phi = mu_one * p_phi
    density = None
    if grid is not None:
        if eps is None:
            raise ValueError("eps is required for a density estimate")
        density = mollify(PointMeasure(ens.positions, w), eps, grid)
    return Estimate(mu_phi, mu_one, float(np.exp(-log_one)), p_phi, density)


def systematic_indices(w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    M = w.size
    u = (rng.uniform() + np.arange(M)) / M
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, u, side="right").clip(max=M - 1)


def resample(ens: ParticleEnsemble, rng: np.random.Generator, threshold: float = 0.5,
             force: bool = False) -> ParticleEnsemble:
    """Systematic resampling when ``ESS < threshold * M``; the mass accumulator absorbs the mean weight."""
    M = ens.size
    if not force and ens.ess() >= threshold * M:
        return ens
    log_one = ens.log_total_mass()
    idx = systematic_indices(ens.normalized_weights(), rng)
    ens.positions = ens.positions[idx]
    if ens.prev_positions is not None:
        ens.prev_positions = ens.prev_positions[idx]
    ens.logw = np.zeros(M)
    ens.log_mass = log_one
    ens.n_resamples += 1
    return ens


# ---------------------------------------------------------------------------
# driver


@dataclass
class FilterResult:
    times: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    se: np.ndarray
    mu_one: np.ndarray
    gamma_o: np.ndarray
    ess: np.ndarray
    ensemble: ParticleEnsemble
    n_batches: int = 1
    snapshots: dict[float, ParticleEnsemble] = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mu_one", "gamma_o", "mean", "var", "se", "ess"])
            for k, t in enumerate(self.times):
                row = [t, self.mu_one[k], self.gamma_o[k], self.mean[k], self.var[k], self.se[k], self.ess[k]]
                w.writerow([f"{v:.17g}" for v in row])


def sample_grid_density(g: GridDensity, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw from a one-dimensional grid density by inverse CDF with linear interpolation."""
    if g.d != 1:
        raise ValueError("only one-dimensional grid densities can be sampled")
    x = g.axes()[0]
    v = np.clip(g.values, 0, None)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * g.h)])
    cdf /= cdf[-1]
    return np.interp(rng.uniform(size=n), cdf, x)[:, None]


def _batch_stats(batches: list[ParticleEnsemble]) -> tuple[float, float, float, float, float]:
    """Pooled mean/variance and ratio-estimator SE over independent sub-ensembles."""
    logs = np.array([b.log_total_mass() for b in batches])
    ref = logs.max()
    mass = np.exp(logs - ref)
    w_all = [b.normalized_weights() for b in batches]
    m1 = np.array([wb @ b.positions[:, 0] for wb, b in zip(w_all, batches)])
    m2 = np.array([wb @ b.positions[:, 0] ** 2 for wb, b in zip(w_all, batches)])
    total = mass.sum()
    mean = float(mass @ m1 / total)
    var = float(mass @ m2 / total - mean ** 2)
    n_b = len(batches)
    if n_b == 1:
        b, wb = batches[0], w_all[0]
        se = float(np.sqrt(np.sum(wb ** 2 * (b.positions[:, 0] - mean) ** 2)))
    else:
        # ratio estimator: mean = sum(mass * m1) / sum(mass) over iid batches
        resid = mass * (m1 - mean)
        se = float(np.sqrt(np.sum(resid ** 2) / (n_b * (n_b - 1))) / mass.mean())
    mu_one = float(np.exp(ref) * mass.mean())
    ess = float(sum(b.ess() for b in batches))
    return mean, var, se, mu_one, ess


def run_particle_filter(coeffs: CoefficientSet, initial: np.ndarray | Callable, obs: ObservationRecord,
                        n_particles: int, seed: int, resample_threshold: float = 0.5, n_batches: int = 1,
                        record_every: int = 1, snapshot_times=(), T: float | None = None) -> FilterResult:
    """Run the weighted particle filter over an observation record.

    With ``n_batches > 1`` the particles are split into independent
    sub-ensembles (each resampled on its own), pooled through their
    unnormalised masses; the reported SE then comes from the spread of the
    batches and accounts for resampling. With one batch the SE is the
    delta-method value ``sqrt(sum w^2 (X - mean)^2)``.
    """
    c = coeffs
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    if callable(initial):
        pos = np.asarray(initial(rng, n_particles), dtype=float)
    else:
        pos = np.asarray(initial, dtype=float)
    if pos.ndim == 1:
        pos = pos[:, None]
    if pos.shape[0] != n_particles:
        raise ValueError("initial positions must have one row per particle")
    if n_particles % n_batches:
        raise ValueError("n_batches must divide the particle count")
    size = n_particles // n_batches
    batches = [ParticleEnsemble.from_positions(pos[i * size:(i + 1) * size]) for i in range(n_batches)]
    dt = obs.dt
    n = obs.n_steps if T is None else int(round(T / dt))
    snaps_wanted = sorted(snapshot_times)
    snaps: dict[float, ParticleEnsemble] = {}
    out = {key: [] for key in ("t", "mean", "var", "se", "mu", "ess")}

    def record(t):
        mean, var, se, mu_one, ess = _batch_stats(batches)
        out["t"].append(t)
        out["mean"].append(mean)
        out["var"].append(var)
        out["se"].append(se)
        out["mu"].append(mu_one)
        out["ess"].append(ess)

    record(0.0)
    for k in range(n):
        jumps = obs.jumps_in_step(k)
        y = obs.Y[k]
        for b in batches:
            propagate(b, c, obs.dVQ[k], jumps, dt, rng, y)
            update_weights(b, c, obs.dVQ[k], dt, y)
        if (k + 1) % record_every == 0 or k + 1 == n:
            record((k + 1) * dt)
        while snaps_wanted and snaps_wanted[0] <= (k + 1) * dt + 1e-12:
            snaps[snaps_wanted.pop(0)] = _pooled(batches)
        for b in batches:
            resample(b, rng, resample_threshold)
    mu = np.array(out["mu"])
    return FilterResult(np.array(out["t"]), np.array(out["mean"]), np.array(out["var"]), np.array(out["se"]),
                        mu, 1.0 / mu, np.array(out["ess"]), _pooled(batches), n_batches, snaps)


def _pooled(batches: list[ParticleEnsemble]) -> ParticleEnsemble:
    """Single ensemble equivalent to the union of independent sub-ensembles."""
    if len(batches) == 1:
        b = batches[0]
        return ParticleEnsemble(b.positions.copy(), b.logw.copy(), b.log_mass, b.t, None, b.n_resamples)
    logs = np.array([b.log_total_mass() for b in batches])
    pos = [b.positions for b in batches]
    # within a batch normalised weights times that batch's mass, on a common scale
    with np.errstate(divide="ignore"):
        logw = [np.log(b.normalized_weights()) + lg for b, lg in zip(batches, logs)]
    logw = np.concatenate(logw)
    M = sum(b.size for b in batches)
    ref = logw.max()
    ens = ParticleEnsemble(np.concatenate(pos), logw - ref, 0.0, batches[0].t)
    # mean(exp(logw)) * exp(log_mass) must equal the pooled mass estimate mean_b mu_b
    ens.log_mass = float(np.log(np.mean(np.exp(logs))) - np.log(np.mean(np.exp(ens.logw))))
    return ens
