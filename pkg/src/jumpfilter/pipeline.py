"""Simulate a signal/observation pair, filter it on the grid and with particles, and compare."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimates import padded_grid
from .grid import GridDensity, gaussian_density
from .model import CoefficientSet
from .mollify import PointMeasure, mollify
from .particle_filter import FilterResult, ParticleEnsemble, run_particle_filter
from .sde_sim import ObservationRecord, PathRecord, extract_observation_noise, simulate_joint
from .zakai import ZakaiResult, default_radius, solve

# SeedSequence entropy tags separating the streams derived from one run seed
PF_STREAM = 1
X0_STREAM = 2


@dataclass(frozen=True)
class InitialLaw:
    """Gaussian initial law ``N(mean, var)`` in one dimension."""

    mean: float = 0.0
    var: float = 0.5

    @property
    def sd(self) -> float:
        return math.sqrt(self.var)

    def effective_radius(self, sigmas: float = 8.0) -> float:
        return abs(self.mean) + sigmas * self.sd

    def on_grid(self, radius: float, h: float) -> GridDensity:
        g = GridDensity.on_box(radius, h, fn=lambda x: gaussian_density(x, self.var, self.mean))
        return g.like(g.values / g.integral())

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + self.sd * rng.standard_normal((n, 1))


def draw_x0(law: InitialLaw, seed: int, path: int = 0) -> float:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, X0_STREAM, path])))
    return float(law.sample(rng, 1)[0, 0])


def required_radius(coeffs: CoefficientSet, law: InitialLaw, T: float) -> float:
    """Smallest box half-width covering the initial law, diffusive spread and jump reach."""
    reach = 0.0
    if coeffs.has_observation_jumps and coeffs.xi_bar is not None:
        reach += sum(float(coeffs.xi_bar(z)) for z in coeffs.nu1.marks) * 4.0
    if coeffs.has_signal_jumps and coeffs.eta_bar is not None:
        reach += sum(float(coeffs.eta_bar(z)) for z in coeffs.nu0.marks) * 4.0
    return default_radius(coeffs, law.effective_radius(), T) + reach


def simulate_truth(coeffs: CoefficientSet, law: InitialLaw, T: float, dt: float, seed: int,
                   y0: float = 0.0) -> tuple[PathRecord, ObservationRecord]:
    path = simulate_joint(coeffs, [draw_x0(law, seed), y0], T, dt, seed=seed)
    return path, extract_observation_noise(path, coeffs)


def run_zakai(coeffs: CoefficientSet, law: InitialLaw, obs: ObservationRecord, h: float, radius: float,
              output_dt: float) -> ZakaiResult:
    every = max(1, int(round(output_dt / obs.dt)))
    times = obs.dt * np.arange(0, obs.n_steps + 1, every)
    return solve(coeffs, law.on_grid(radius, h), obs, record_every=every, snapshot_times=times)


def run_particles(coeffs: CoefficientSet, law: InitialLaw, obs: ObservationRecord, n_particles: int,
                  seed: int, output_dt: float, resample_threshold: float = 0.5, n_batches: int = 1) -> FilterResult:
    every = max(1, int(round(output_dt / obs.dt)))
    times = obs.dt * np.arange(0, obs.n_steps + 1, every)
    return run_particle_filter(coeffs, law.sample, obs, n_particles, seed=[seed, PF_STREAM],
                               resample_threshold=resample_threshold, n_batches=n_batches,
                               record_every=every, snapshot_times=times[1:])


# ---------------------------------------------------------------------------
# comparison


@dataclass
class FilterSummary:
    """Posterior mean series with standard errors and normalised densities (or particle clouds)."""

    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    grids: dict[int, GridDensity] = field(default_factory=dict)
    clouds: dict[int, ParticleEnsemble] = field(default_factory=dict)

    @classmethod
    def of(cls, result) -> "FilterSummary":
        if isinstance(result, FilterSummary):
            return result
        if isinstance(result, ZakaiResult):
            grids = {}
            for t, u in result.snapshots.items():
                k = _time_index(result.times, t)
                grids[k] = u.like(u.values / u.integral())
            return cls(result.times, result.mean, np.zeros_like(result.mean), grids=grids)
        if isinstance(result, FilterResult):
            clouds = {_time_index(result.times, t): e for t, e in result.snapshots.items()}
            return cls(result.times, result.mean, result.se, clouds=clouds)
        raise TypeError(f"cannot summarise {type(result).__name__}")


def _time_index(times: np.ndarray, t: float) -> int:
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 1e-9:
        raise ValueError(f"snapshot time {t} is not an output time")
    return k


def _grid_covering(ref: GridDensity, pts: np.ndarray | None, eps: float) -> GridDensity:
    """Grid aligned with ``ref`` that covers ``ref`` and the points, padded for mollification."""
    base = padded_grid(ref, eps)
    if pts is None or pts.size == 0:
        return base
    pad = 6.0 * math.sqrt(eps) + 2 * ref.h
    lo = min(base.lower[0], pts.min() - pad)
    hi = max(base.upper[0], pts.max() + pad)
    n_lo = int(math.ceil((ref.lower[0] - lo) / ref.h))
    n_hi = int(math.ceil((hi - ref.upper[0]) / ref.h))
    n = ref.shape[0] + n_lo + n_hi
    return GridDensity(np.zeros(n), ref.lower - n_lo * ref.h, ref.h, ref.t)


def _mollified_density(s: FilterSummary, k: int, out: GridDensity, eps: float) -> np.ndarray | None:
    if k in s.grids:
        return mollify(s.grids[k], eps, grid=out).values
    if k in s.clouds:
        e = s.clouds[k]
        return mollify(PointMeasure(e.positions, e.normalized_weights()), eps, grid=out).values
    return None


@dataclass
class ComparisonReport:
    times: np.ndarray
    mean_a: np.ndarray
    mean_b: np.ndarray
    se: np.ndarray
    l1_gap: np.ndarray
    n_se: float = 3.0

    @property
    def gap(self) -> np.ndarray:
        return self.mean_a - self.mean_b

    @property
    def z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.se > 0, np.abs(self.gap) / self.se, np.where(self.gap == 0, 0.0, np.inf))

    @property
    def passed(self) -> bool:
        return bool(np.all(self.z <= self.n_se))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mean_pf", "mean_zakai", "se", "L1_density_gap"])
            for row in zip(self.times, self.mean_a, self.mean_b, self.se, self.l1_gap):
                w.writerow([f"{v:.17g}" for v in row])


def compare(a, b, discretisation: np.ndarray | None = None, kde_eps: float = 0.01,
            n_se: float = 3.0) -> ComparisonReport:
    """Per-time mean gaps, combined standard errors and mollified-density L1 distances.

    ``a`` and ``b`` are filter results (particle or grid) on the same output
    times. The combined SE is ``sqrt(se_a^2 + se_b^2 + discretisation^2)``.
    Densities of both sides are mollified with ``kde_eps`` on a common grid;
    the L1 gap is NaN at times where either side has no density.
    """
    sa, sb = FilterSummary.of(a), FilterSummary.of(b)
    if sa.times.shape != sb.times.shape or not np.allclose(sa.times, sb.times, rtol=0, atol=1e-9):
        raise ValueError("filter outputs are on misaligned time grids")
    disc = np.zeros_like(sa.mean) if discretisation is None else np.asarray(discretisation, dtype=float)
    se = np.sqrt(sa.se ** 2 + sb.se ** 2 + disc ** 2)
    l1 = np.full(sa.times.shape, np.nan)
    ref = next(iter(sa.grids.values()), None) or next(iter(sb.grids.values()), None)
    if ref is not None:
        for k in range(sa.times.size):
            pts = [s.clouds[k].positions[:, 0] for s in (sa, sb) if k in s.clouds]
            out = _grid_covering(ref, np.concatenate(pts) if pts else None, kde_eps)
            da, db = _mollified_density(sa, k, out, kde_eps), _mollified_density(sb, k, out, kde_eps)
            if da is not None and db is not None:
                l1[k] = float(np.sum(np.abs(da - db)) * out.h)
    return ComparisonReport(sa.times, sa.mean, sb.mean, se, l1, n_se)


@dataclass
class FilterRun:
    """Everything produced by one seed of the filtering experiment."""

    seed: int
    path: PathRecord
    obs: ObservationRecord
    zakai: ZakaiResult | None = None
    zakai_check: ZakaiResult | None = None
    particles: FilterResult | None = None
    report: ComparisonReport | None = None


def filter_experiment(coeffs: CoefficientSet, law: InitialLaw, T: float, dt: float, h: float, seed: int,
                      n_particles: int = 10_000, output_dt: float = 0.1, radius: float | None = None,
                      method: str = "both", check_refinement: bool = True, kde_eps: float = 0.01,
                      resample_threshold: float = 0.5, n_batches: int = 1) -> FilterRun:
    """Simulate one truth path and filter its observations.

    With ``check_refinement`` the grid solve is repeated at ``(2h, 2dt)`` on
    the coarsened record; the difference of the two mean series is the
    discretisation term in the combined SE.
    """
    if method not in ("particle", "zakai", "both"):
        raise ValueError(f"unknown filter method {method!r}")
    radius = required_radius(coeffs, law, T) if radius is None else radius
    path, obs = simulate_truth(coeffs, law, T, dt, seed)
    run = FilterRun(seed, path, obs)
    if method in ("zakai", "both"):
        run.zakai = run_zakai(coeffs, law, obs, h, radius, output_dt)
        if check_refinement:
            run.zakai_check = run_zakai(coeffs, law, obs.coarsen(2), 2 * h, radius, output_dt)
    if method in ("particle", "both"):
        run.particles = run_particles(coeffs, law, obs, n_particles, seed, output_dt, resample_threshold, n_batches)
    if method == "both":
        disc = None
        if run.zakai_check is not None:
            disc = run.zakai.mean - run.zakai_check.mean
        run.report = compare(run.particles, run.zakai, disc, kde_eps)
    return run
