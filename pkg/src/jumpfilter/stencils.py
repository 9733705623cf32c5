"""Centred finite differences and Sobolev norms on grids with zero exterior."""

from __future__ import annotations

import itertools

import numpy as np

from .grid import GridDensity


def _shift(f: np.ndarray, axis: int, k: int) -> np.ndarray:
    """``f`` shifted so that entry ``i`` holds ``f[i + k]``, zero beyond the grid."""
    out = np.zeros_like(f)
    n = f.shape[axis]
    src = [slice(None)] * f.ndim
    dst = [slice(None)] * f.ndim
    if k >= 0:
        src[axis], dst[axis] = slice(k, n), slice(0, n - k)
    else:
        src[axis], dst[axis] = slice(0, n + k), slice(-k, n)
    out[tuple(dst)] = f[tuple(src)]
    return out


def diff1(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Centred first difference ``(f[i+1] - f[i-1]) / 2h``."""
    return (_shift(f, axis, 1) - _shift(f, axis, -1)) / (2 * h)


def diff2(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Three-point second difference ``(f[i+1] - 2 f[i] + f[i-1]) / h^2``."""
    return (_shift(f, axis, 1) - 2 * f + _shift(f, axis, -1)) / (h * h)


def second_partial(f: np.ndarray, i: int, j: int, h: float) -> np.ndarray:
    return diff2(f, i, h) if i == j else diff1(diff1(f, i, h), j, h)


def derivative_tensor(values: np.ndarray, k: int, h: float) -> list[np.ndarray]:
    """All ordered ``k``-th partial differences (``d^k`` arrays).

    Even-order pure derivatives use repeated three-point differences, the
    rest nested centred differences.
    """
    d = values.ndim
    out = []
    for idx in itertools.product(range(d), repeat=k):
        f = values
        counts = np.bincount(np.array(idx, dtype=int), minlength=d) if k else np.zeros(d, int)
        for axis in range(d):
            c = int(counts[axis])
            for _ in range(c // 2):
                f = diff2(f, axis, h)
            if c % 2:
                f = diff1(f, axis, h)
        out.append(f)
    return out


MAX_RESOLVED_ORDER = 2
COARSE_SPACING = 0.05


def wmp_norm(u: GridDensity, m: int, p: float) -> float:
    """``(sum_{k<=m} int |D^k u|^p dx)^{1/p}`` with ``|D^k u|`` the Euclidean norm of the derivative tensor."""
    if m < 0 or p < 1:
        raise ValueError("need m >= 0 and p >= 1")
    if m > MAX_RESOLVED_ORDER and u.h > COARSE_SPACING:
        raise ValueError(f"m={m} derivatives are not resolved on a grid with h={u.h}")
    total = 0.0
    for k in range(m + 1):
        comps = derivative_tensor(u.values, k, u.h) if k else [u.values]
        mag = np.sqrt(sum(c ** 2 for c in comps))
        total += float(np.sum(mag ** p) * u.cell_volume)
    return total ** (1.0 / p)
