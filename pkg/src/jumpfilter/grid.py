"""Uniform box grids and densities sampled on them."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

_GRID_MAGIC = b"JFGRID01"


@dataclass
class GridDensity:
    """Node values of a function on a uniform grid in one or two dimensions.

    Node ``i`` along axis ``k`` sits at ``lower[k] + i * h``. Values outside
    the grid are taken to be zero by every operator in the package.
    """

    values: np.ndarray
    lower: np.ndarray
    h: float
    t: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        if self.values.ndim != self.lower.size:
            raise ValueError(
                f"values have {self.values.ndim} axes but lower has {self.lower.size} entries"
            )
        if self.values.ndim not in (1, 2):
            raise ValueError("only d=1 and d=2 grids are supported")
        if not self.h > 0:
            raise ValueError("grid spacing must be positive")

    # construction -------------------------------------------------------

    @classmethod
    def on_box(cls, radius: float, h: float, d: int = 1, fn: Callable | None = None,
               t: float = 0.0) -> "GridDensity":
        """Grid on ``[-radius, radius]^d`` with ``fn`` sampled at the nodes.

        ``fn`` receives points of shape ``(..., d)``.
        """
        n = int(round(2 * radius / h)) + 1
        lower = np.full(d, -radius)
        values = np.zeros((n,) * d)
        grid = cls(values, lower, h, t)
        if fn is not None:
            grid.values = np.asarray(fn(grid.points()), dtype=float).reshape(grid.shape)
        return grid

    def like(self, values: np.ndarray, t: float | None = None) -> "GridDensity":
        return replace(self, values=np.asarray(values, dtype=float),
                       t=self.t if t is None else t, meta={})

    def copy(self) -> "GridDensity":
        return replace(self, values=self.values.copy(), lower=self.lower.copy(),
                       meta=dict(self.meta))

    # geometry -----------------------------------------------------------

    @property
    def d(self) -> int:
        return self.values.ndim

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.h * (np.array(self.shape) - 1)

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    def axes(self) -> list[np.ndarray]:
        return [self.lower[k] + self.h * np.arange(n) for k, n in enumerate(self.shape)]

    def points(self) -> np.ndarray:
        """Node coordinates with shape ``shape + (d,)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)

    def flat_points(self) -> np.ndarray:
        return self.points().reshape(-1, self.d)

    def same_grid(self, other: "GridDensity") -> bool:
        return (self.shape == other.shape and np.isclose(self.h, other.h, rtol=1e-12)
                and np.allclose(self.lower, other.lower, rtol=0, atol=1e-9 * self.h))

    def require_same_grid(self, other: "GridDensity") -> None:
        if not self.same_grid(other):
            raise ValueError("grid mismatch between operands")

    def support_box(self, rel_tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray] | None:
        """Bounding box of nodes with ``|u| > rel_tol * max|u|``; None if u == 0."""
        peak = np.max(np.abs(self.values))
        if peak == 0:
            return None
        mask = np.abs(self.values) > rel_tol * peak
        pts = self.points()[mask]
        return pts.min(axis=0), pts.max(axis=0)

    # integrals ----------------------------------------------------------

    def integral(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def integrate(self, fn_values: np.ndarray) -> float:
        return float(np.sum(self.values * fn_values) * self.cell_volume)

    def moment1(self) -> np.ndarray:
        pts = self.points()
        return np.tensordot(self.values, pts, axes=self.d) * self.cell_volume

    def mean(self) -> np.ndarray:
        return self.moment1() / self.integral()

    def covariance(self) -> np.ndarray:
        pts = self.points().reshape(-1, self.d)
        w = self.values.reshape(-1) * self.cell_volume
        mass = w.sum()
        mu = (w @ pts) / mass
        c = pts - mu
        return (c * w[:, None]).T @ c / mass

    def lp_norm(self, p: float) -> float:
        return float((np.sum(np.abs(self.values) ** p) * self.cell_volume) ** (1.0 / p))

    def l1_distance(self, other: "GridDensity") -> float:
        self.require_same_grid(other)
        return float(np.sum(np.abs(self.values - other.values)) * self.cell_volume)

    def normalized(self) -> "GridDensity":
        return self.like(self.values / self.integral())

    # interpolation ------------------------------------------------------

    def interpolate(self, x: np.ndarray, order: int = 3) -> np.ndarray:
        """Cubic B-spline interpolation at points ``x`` of shape ``(..., d)``; zero outside."""
        from scipy.ndimage import map_coordinates

        x = np.asarray(x, dtype=float)
        coords = (x.reshape(-1, self.d) - self.lower) / self.h
        vals = map_coordinates(self.values, coords.T, order=order, mode="constant",
                               cval=0.0, prefilter=True)
        return vals.reshape(x.shape[:-1])

    # binary I/O ---------------------------------------------------------

    def write_binary(self, path: str | Path) -> None:
        """Header: magic, int64 d, int64 shape[d], float64 h, lower[d], upper[d], t.

        Payload: row-major little-endian float64 node values.
        """
        d = self.d
        with open(path, "wb") as fh:
            fh.write(_GRID_MAGIC)
            fh.write(struct.pack("<q", d))
            fh.write(struct.pack(f"<{d}q", *self.shape))
            fh.write(struct.pack("<d", self.h))
            fh.write(struct.pack(f"<{d}d", *self.lower))
            fh.write(struct.pack(f"<{d}d", *self.upper))
            fh.write(struct.pack("<d", self.t))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes(order="C"))

    @classmethod
    def read_binary(cls, path: str | Path) -> "GridDensity":
        data = Path(path).read_bytes()
        if data[:8] != _GRID_MAGIC:
            raise ValueError(f"{path}: not a grid density file")
        off = 8
        (d,) = struct.unpack_from("<q", data, off)
        off += 8
        shape = struct.unpack_from(f"<{d}q", data, off)
        off += 8 * d
        (h,) = struct.unpack_from("<d", data, off)
        off += 8
        lower = np.array(struct.unpack_from(f"<{d}d", data, off))
        off += 16 * d  # lower and upper
        (t,) = struct.unpack_from("<d", data, off)
        off += 8
        values = np.frombuffer(data, dtype="<f8", offset=off, count=int(np.prod(shape)))
        return cls(values.reshape(shape).astype(float), lower, h, t)


def gaussian_density(x: np.ndarray, var: float | np.ndarray, mean: float | np.ndarray = 0.0) -> np.ndarray:
    """Isotropic (or diagonal) normal density at points ``x`` of shape ``(..., d)``."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    var = np.broadcast_to(np.asarray(var, dtype=float), (d,))
    z = (x - mean) ** 2 / var
    return np.exp(-0.5 * z.sum(axis=-1)) / np.sqrt((2 * np.pi) ** d * np.prod(var))
