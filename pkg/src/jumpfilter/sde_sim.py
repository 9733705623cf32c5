"""Euler-Maruyama simulation of the signal-observation jump system.

Between jumps::

    dX = (b - int eta dnu0 - int xi dnu1) dt + sigma dW + rho dV
    dY = (B - m1) dt + dV

with ``m1 = int z nu1(dz)``. Jumps of either Poisson measure falling in a
step are applied at the end of that step, in time order, using the state
just before each jump: ``X += eta`` for signal jumps, ``X += xi`` and
``Y += z`` for observation jumps.

Seed contract: path ``i`` draws source ``s`` (0 = W, 1 = V, 2 = signal
jumps, 3 = observation jumps) from a Philox stream keyed by
``SeedSequence(seed, spawn_key=(i, s))``.
"""

from __future__ import annotations

import csv
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import CoefficientSet, JumpMeasure

log = logging.getLogger(__name__)

SOURCE_W, SOURCE_V, SOURCE_N0, SOURCE_N1 = range(4)
OVERFLOW_BOUND = 1e100
_LEDGER_MAGIC = b"JFNOISE1"


class BlowUpError(RuntimeError):
    """The simulated state exceeded the overflow bound."""


def source_rng(seed: int, path: int, source: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(path, source))
    return np.random.Generator(np.random.Philox(ss))


def n_steps_for(T: float, dt: float) -> int:
    n = int(round(T / dt))
    if n <= 0 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    return n


@dataclass
class JumpLedger:
    """Jump times, atom indices and marks of one Poisson measure, sorted by time."""

    times: np.ndarray
    marks: np.ndarray
    atoms: np.ndarray

    @classmethod
    def empty(cls, mark_dim: int) -> "JumpLedger":
        return cls(np.zeros(0), np.zeros((0, mark_dim)), np.zeros(0, dtype=int))

    @classmethod
    def draw(cls, nu: JumpMeasure | None, T: float, rng: np.random.Generator, mark_dim: int = 1) -> "JumpLedger":
        if nu is None or nu.total_mass <= 0:
            return cls.empty(nu.mark_dim if nu is not None else mark_dim)
        rate = nu.total_mass
        times = []
        t = rng.exponential(1.0 / rate)
        while t <= T:
            times.append(t)
            t += rng.exponential(1.0 / rate)
        times = np.asarray(times)
        atoms = nu.sample_indices(rng, times.size) if times.size else np.zeros(0, dtype=int)
        return cls(times, nu.marks[atoms].copy(), atoms)

    def __len__(self) -> int:
        return self.times.size

    def step_indices(self, dt: float) -> np.ndarray:
        """Index ``k`` of the step ``(k dt, (k + 1) dt]`` containing each jump."""
        return np.maximum(np.ceil(self.times / dt - 1e-12).astype(int) - 1, 0)


@dataclass
class DrivingNoise:
    """All randomness used for one path."""

    dt: float
    dW: np.ndarray
    dV: np.ndarray
    jumps0: JumpLedger
    jumps1: JumpLedger

    @property
    def n_steps(self) -> int:
        return self.dW.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    @classmethod
    def draw(cls, coeffs: CoefficientSet, T: float, dt: float, seed: int, path: int = 0) -> "DrivingNoise":
        n = n_steps_for(T, dt)
        sq = np.sqrt(dt)
        dW = source_rng(seed, path, SOURCE_W).standard_normal((n, coeffs.d_w)) * sq
        dV = source_rng(seed, path, SOURCE_V).standard_normal((n, coeffs.d_obs)) * sq
        j0 = JumpLedger.draw(coeffs.nu0 if coeffs.has_signal_jumps else None, n * dt,
                             source_rng(seed, path, SOURCE_N0), 1)
        j1 = JumpLedger.draw(coeffs.nu1 if coeffs.has_observation_jumps else None, n * dt,
                             source_rng(seed, path, SOURCE_N1), coeffs.d_obs)
        return cls(dt, dW, dV, j0, j1)

    def write_binary(self, path: str | Path) -> None:
        """Layout (little-endian): magic ``JFNOISE1``; int64 ``d_w, d_obs, dz0, dz1,
        n_steps, n_jumps0, n_jumps1``; float64 ``dt``; then float64 arrays
        ``dW[n_steps, d_w]``, ``dV[n_steps, d_obs]``, ``jumps0[n_jumps0, 1 + dz0]``
        and ``jumps1[n_jumps1, 1 + dz1]`` (time followed by mark), then int64
        atom indices for both ledgers.
        """
        dz0 = self.jumps0.marks.shape[1]
        dz1 = self.jumps1.marks.shape[1]
        with open(path, "wb") as fh:
            fh.write(_LEDGER_MAGIC)
            fh.write(struct.pack("<7q", self.dW.shape[1], self.dV.shape[1], dz0, dz1, self.n_steps,
                                 len(self.jumps0), len(self.jumps1)))
            fh.write(struct.pack("<d", self.dt))
            for arr in (self.dW, self.dV,
                        np.column_stack([self.jumps0.times, self.jumps0.marks]),
                        np.column_stack([self.jumps1.times, self.jumps1.marks])):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            for arr in (self.jumps0.atoms, self.jumps1.atoms):
                fh.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())

    @classmethod
    def read_binary(cls, path: str | Path) -> "DrivingNoise":
        data = Path(path).read_bytes()
        if data[:8] != _LEDGER_MAGIC:
            raise ValueError(f"{path}: not a noise ledger file")
        d_w, d_obs, dz0, dz1, n, k0, k1 = struct.unpack_from("<7q", data, 8)
        (dt,) = struct.unpack_from("<d", data, 64)
        off = 72

        def take(count, dtype="<f8"):
            nonlocal off
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
            off += 8 * count
            return arr.copy()

        dW = take(n * d_w).reshape(n, d_w)
        dV = take(n * d_obs).reshape(n, d_obs)
        j0 = take(k0 * (1 + dz0)).reshape(k0, 1 + dz0)
        j1 = take(k1 * (1 + dz1)).reshape(k1, 1 + dz1)
        a0 = take(k0, "<i8")
        a1 = take(k1, "<i8")
        return cls(dt, dW, dV, JumpLedger(j0[:, 0], j0[:, 1:], a0), JumpLedger(j1[:, 0], j1[:, 1:], a1))


@dataclass
class PathRecord:
    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    noise: DrivingNoise
    name: str = ""

    @property
    def dt(self) -> float:
        return self.noise.dt

    def to_csv(self, path: str | Path, gamma: np.ndarray | None = None) -> None:
        d, d_obs = self.X.shape[1], self.Y.shape[1]
        header = ["t"] + [f"X{i}" for i in range(d)] + [f"Y{i}" for i in range(d_obs)]
        if gamma is not None:
            header.append("gamma")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, t in enumerate(self.times):
                row = [t, *self.X[k], *self.Y[k]] + ([gamma[k]] if gamma is not None else [])
                w.writerow([f"{v:.17g}" for v in row])


# ---------------------------------------------------------------------------
# shared stepper kernel


def continuous_increment(coeffs: CoefficientSet, t: float, x: np.ndarray, y: np.ndarray, dt: float,
                         dW: np.ndarray, dV: np.ndarray, drift_shift: np.ndarray | None = None) -> np.ndarray:
    """``(b - compensator [+ shift]) dt + sigma dW + rho dV`` with left-point coefficients."""
    drift = coeffs.b(t, x, y) - coeffs.compensator_drift(t, x, y)
    if drift_shift is not None:
        drift = drift + drift_shift
    return (drift * dt + np.einsum("...ij,...j->...i", coeffs.sigma(t, x, y), dW)
            + np.einsum("...ij,...j->...i", coeffs.rho(t, x, y), dV))


def guard(*arrays: np.ndarray) -> None:
    total = sum(np.max(np.abs(a)) if a.size else 0.0 for a in arrays)
    if not np.isfinite(total) or total > OVERFLOW_BOUND:
        raise BlowUpError(f"state magnitude {total:.3e} exceeds overflow bound {OVERFLOW_BOUND:.0e}")


def _merged_events(noise: DrivingNoise) -> list[tuple[int, float, int, np.ndarray]]:
    """(step, time, source, mark) for both ledgers, in time order."""
    events = []
    for src, led in ((0, noise.jumps0), (1, noise.jumps1)):
        for k, t, z in zip(led.step_indices(noise.dt), led.times, led.marks):
            events.append((int(k), float(t), src, z))
    events.sort(key=lambda e: (e[0], e[1]))
    return events


def simulate_with_noise(coeffs: CoefficientSet, z0: np.ndarray, noise: DrivingNoise) -> PathRecord:
    c = coeffs
    z0 = np.asarray(z0, dtype=float).reshape(-1)
    if z0.size != c.d + c.d_obs:
        raise ValueError(f"initial state must have {c.d + c.d_obs} entries")
    n, dt = noise.n_steps, noise.dt
    X = np.empty((n + 1, c.d))
    Y = np.empty((n + 1, c.d_obs))
    X[0], Y[0] = z0[: c.d], z0[c.d:]
    m1 = c.m1
    events = _merged_events(noise)
    ptr = 0
    for k in range(n):
        t = k * dt
        x, y = X[k], Y[k]
        x_new = x + continuous_increment(c, t, x, y, dt, noise.dW[k], noise.dV[k])
        y_new = y + (c.B(t, x, y) - m1) * dt + noise.dV[k]
        while ptr < len(events) and events[ptr][0] == k:
            _, tj, src, z = events[ptr]
            if src == 0:
                x_new = x_new + c.eta(tj, x_new, y_new, z)
            else:
                x_new, y_new = x_new + c.xi(tj, x_new, y_new, z), y_new + z
            ptr += 1
        X[k + 1], Y[k + 1] = x_new, y_new
        guard(x_new, y_new)
    return PathRecord(noise.times, X, Y, noise, c.name)


def simulate_joint(coeffs: CoefficientSet, z0: np.ndarray, T: float, dt: float, seed: int,
                   path_index: int = 0) -> PathRecord:
    """Simulate one path together with its full noise ledger."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    noise = DrivingNoise.draw(coeffs, T, dt, seed, path_index)
    return simulate_with_noise(coeffs, z0, noise)


def simulate_diffusion_reference(coeffs: CoefficientSet, z0: np.ndarray, noise: DrivingNoise) -> PathRecord:
    """Plain Euler stepper without any jump machinery (reference for jump-free models)."""
    c = coeffs
    z0 = np.asarray(z0, dtype=float).reshape(-1)
    n, dt = noise.n_steps, noise.dt
    X = np.empty((n + 1, c.d))
    Y = np.empty((n + 1, c.d_obs))
    X[0], Y[0] = z0[: c.d], z0[c.d:]
    for k in range(n):
        t = k * dt
        x, y = X[k], Y[k]
        X[k + 1] = x + ((c.b(t, x, y) - 0.0) * dt + c.sigma(t, x, y) @ noise.dW[k] + c.rho(t, x, y) @ noise.dV[k])
        Y[k + 1] = y + (c.B(t, x, y) - 0.0) * dt + noise.dV[k]
    return PathRecord(noise.times, X, Y, noise, c.name)


@dataclass
class EnsembleResult:
    X_T: np.ndarray
    Y_T: np.ndarray
    sup_sq: np.ndarray
    log_gamma_T: np.ndarray
    z0: np.ndarray
    gamma_mean_path: np.ndarray
    paths_X: np.ndarray | None = None
    paths_Y: np.ndarray | None = None


def simulate_ensemble(coeffs: CoefficientSet, z0: np.ndarray, T: float, dt: float, n_paths: int,
                      seed: int, store_paths: bool = False) -> EnsembleResult:
    """Vectorised simulation of independent paths under the per-path seed contract.

    ``z0`` is one state or one state per path. Tracks ``sup_t |X|^2 + |Y|^2``
    and ``log gamma_T`` per path; results equal ``simulate_joint`` path by path
    up to floating-point summation order.
    """
    c = coeffs
    n = n_steps_for(T, dt)
    z0 = np.broadcast_to(np.asarray(z0, dtype=float), (n_paths, c.d + c.d_obs)).copy()
    noises = [DrivingNoise.draw(c, T, dt, seed, i) for i in range(n_paths)]
    dW = np.stack([nz.dW for nz in noises], axis=1)  # (n, P, d_w)
    dV = np.stack([nz.dV for nz in noises], axis=1)
    events: dict[int, list[tuple[float, int, int, np.ndarray]]] = {}
    for i, nz in enumerate(noises):
        for src, led in ((0, nz.jumps0), (1, nz.jumps1)):
            for k, t, z in zip(led.step_indices(dt), led.times, led.marks):
                events.setdefault(int(k), []).append((float(t), i, src, z))
    x, y = z0[:, : c.d].copy(), z0[:, c.d:].copy()
    sup_sq = np.sum(z0 ** 2, axis=1)
    log_gamma = np.zeros(n_paths)
    gamma_mean = np.ones(n + 1)
    m1 = c.m1
    px = np.empty((n + 1, n_paths, c.d)) if store_paths else None
    py = np.empty((n + 1, n_paths, c.d_obs)) if store_paths else None
    if store_paths:
        px[0], py[0] = x, y
    for k in range(n):
        t = k * dt
        Bv = c.B(t, x, y)
        log_gamma -= np.sum(Bv * dV[k], axis=1) + 0.5 * np.sum(Bv ** 2, axis=1) * dt
        x_new = x + continuous_increment(c, t, x, y, dt, dW[k], dV[k])
        y_new = y + (Bv - m1) * dt + dV[k]
        for tj, i, src, z in sorted(events.get(k, []), key=lambda e: e[0]):
            xi_, yi_ = x_new[i:i + 1], y_new[i:i + 1]
            if src == 0:
                x_new[i] = (xi_ + c.eta(tj, xi_, yi_, z))[0]
            else:
                x_new[i] = (xi_ + c.xi(tj, xi_, yi_, z))[0]
                y_new[i] = y_new[i] + z
        x, y = x_new, y_new
        guard(x, y)
        sup_sq = np.maximum(sup_sq, np.sum(x ** 2, axis=1) + np.sum(y ** 2, axis=1))
        gamma_mean[k + 1] = np.mean(np.exp(log_gamma))
        if store_paths:
            px[k + 1], py[k + 1] = x, y
    return EnsembleResult(x, y, sup_sq, log_gamma, z0, gamma_mean, px, py)


def moment_ratio(coeffs: CoefficientSet, z0: np.ndarray, T: float, dt: float, n_paths: int,
                 seed: int) -> float:
    """``E sup_t |Z_t|^2 / (1 + E |Z_0|^2)`` estimated from one ensemble."""
    res = simulate_ensemble(coeffs, z0, T, dt, n_paths, seed)
    return float(res.sup_sq.mean() / (1.0 + np.mean(np.sum(res.z0 ** 2, axis=1))))


def gamma_path(path: PathRecord, coeffs: CoefficientSet) -> np.ndarray:
    """``exp(-sum B . dV - 1/2 sum |B|^2 dt)`` with left-point ``B`` on the time grid."""
    dt = path.dt
    t = path.times[:-1]
    Bv = np.stack([coeffs.B(tk, path.X[k], path.Y[k]) for k, tk in enumerate(t)]) \
        if coeffs.fields_depend_on_ty else coeffs.B(0.0, path.X[:-1], path.Y[:-1])
    incr = np.sum(Bv * path.noise.dV, axis=1) + 0.5 * np.sum(Bv ** 2, axis=1) * dt
    return np.exp(-np.concatenate([[0.0], np.cumsum(incr)]))


# ---------------------------------------------------------------------------
# observable noise


@dataclass
class ObservationRecord:
    """What the filters see: ``dV^Q`` per step and the observation jumps.

    ``jump_step[j]`` is the step containing jump ``j``; ``jump_y_left[j]`` is
    the observation just before that jump.
    """

    dt: float
    dVQ: np.ndarray
    Y: np.ndarray
    jump_step: np.ndarray
    jump_time: np.ndarray
    jump_mark: np.ndarray
    jump_y_left: np.ndarray
    warnings: list[str] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.dVQ.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    @property
    def T(self) -> float:
        return self.dt * self.n_steps

    def jumps_in_step(self, k: int) -> list[tuple[float, np.ndarray, np.ndarray]]:
        idx = np.flatnonzero(self.jump_step == k)
        return [(float(self.jump_time[j]), self.jump_mark[j], self.jump_y_left[j]) for j in idx]

    def coarsen(self, factor: int) -> "ObservationRecord":
        """Merge ``factor`` consecutive steps; jumps keep their times and marks."""
        if factor < 1 or self.n_steps % factor:
            raise ValueError("factor must divide the number of steps")
        n = self.n_steps // factor
        dVQ = self.dVQ.reshape(n, factor, -1).sum(axis=1)
        return ObservationRecord(self.dt * factor, dVQ, self.Y[::factor].copy(), self.jump_step // factor,
                                 self.jump_time.copy(), self.jump_mark.copy(), self.jump_y_left.copy(),
                                 list(self.warnings))

    @classmethod
    def empty(cls, n_steps: int, dt: float, d_obs: int = 1) -> "ObservationRecord":
        return cls(dt, np.zeros((n_steps, d_obs)), np.zeros((n_steps + 1, d_obs)), np.zeros(0, dtype=int),
                   np.zeros(0), np.zeros((0, d_obs)), np.zeros((0, d_obs)))


def extract_observation_noise(path: PathRecord, coeffs: CoefficientSet, mode: str = "ledger",
                              threshold: float | None = None) -> ObservationRecord:
    """Recover ``dV^Q = dY^c + m1 dt`` and the observation jumps from ``Y``.

    ``ledger`` mode reads jumps from the noise ledger. ``threshold`` mode
    flags steps with ``|dY| > threshold`` (default ``8 sqrt(dt)``) and snaps
    the increment to the nearest atom of ``nu1``; ambiguous detections are
    reported as warnings.
    """
    dt = path.dt
    dY = np.diff(path.Y, axis=0)
    d_obs = dY.shape[1]
    m1 = coeffs.m1
    notes: list[str] = []
    if mode == "ledger":
        led = path.noise.jumps1
        steps = led.step_indices(dt)
        times, marks = led.times.copy(), led.marks.copy()
    elif mode == "threshold":
        thr = 8.0 * np.sqrt(dt) if threshold is None else threshold
        size = np.linalg.norm(dY, axis=1)
        steps = np.flatnonzero(size > thr)
        atoms = coeffs.nu1.marks if coeffs.nu1 is not None else np.zeros((0, d_obs))
        marks = np.zeros((steps.size, d_obs))
        for j, k in enumerate(steps):
            if atoms.shape[0] == 0:
                notes.append(f"step {k}: discontinuity but no observation jump measure")
                marks[j] = dY[k]
                continue
            dist = np.linalg.norm(atoms - dY[k], axis=1)
            order = np.argsort(dist)
            marks[j] = atoms[order[0]]
            if dist[order[0]] > 0.5 * thr or (order.size > 1 and dist[order[1]] - dist[order[0]] < thr):
                notes.append(f"step {k}: ambiguous jump increment {dY[k]} snapped to {atoms[order[0]]}")
        small = np.linalg.norm(atoms, axis=1) <= thr if atoms.size else np.zeros(0, dtype=bool)
        if small.any():
            notes.append("some jump marks are below the detection threshold")
        times = (steps + 1) * dt
        for note in notes:
            warnings.warn(note, RuntimeWarning, stacklevel=2)
    else:
        raise ValueError(f"unknown extraction mode {mode!r}")
    jump_part = np.zeros_like(dY)
    np.add.at(jump_part, steps, marks)
    dYc = dY - jump_part
    dVQ = dYc + m1 * dt
    # observation just before each jump: continuous part of the step plus earlier jumps in that step
    y_left = np.zeros((steps.size, d_obs))
    for j, k in enumerate(steps):
        prior = marks[:j][steps[:j] == k].sum(axis=0) if j else 0.0
        y_left[j] = path.Y[k] + dYc[k] + prior
    return ObservationRecord(dt, dVQ, path.Y.copy(), np.asarray(steps, dtype=int), np.asarray(times, float),
                             marks, y_left, notes)
