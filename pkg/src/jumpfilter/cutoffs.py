"""Smooth cutoff functions and the compactly supported bump kernel."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def _g(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    pos = s > 0
    out[pos] = np.exp(-1.0 / s[pos])
    return out


def _dg(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    pos = s > 0
    out[pos] = np.exp(-1.0 / s[pos]) / s[pos] ** 2
    return out


def smooth_step(s):
    """C-infinity transition: 0 for s <= 0, 1 for s >= 1."""
    a, b = _g(s), _g(1.0 - np.asarray(s, dtype=float))
    return a / (a + b)


def smooth_step_derivative(s):
    s = np.asarray(s, dtype=float)
    a, b = _g(s), _g(1.0 - s)
    da, db = _dg(s), _dg(1.0 - s)
    return (da * b + a * db) / (a + b) ** 2


def chi(r):
    """Cutoff on the real line: 1 on [-1, 1], 0 off [-2, 2], values in [0, 1]."""
    return smooth_step(2.0 - np.abs(np.asarray(r, dtype=float)))


def chi_derivative(r):
    r = np.asarray(r, dtype=float)
    return -np.sign(r) * smooth_step_derivative(2.0 - np.abs(r))


def _derivative_bounds(max_order: int = 4) -> tuple[float, ...]:
    # sup |chi^(k)| for k = 1..max_order, by repeated differencing of chi' on a fine mesh
    h = 1e-4
    r = np.arange(0.9, 2.1 + h, h)
    deriv = chi_derivative(r)
    bounds = [float(np.max(np.abs(deriv)))]
    for _ in range(max_order - 1):
        deriv = np.gradient(deriv, h)
        bounds.append(float(np.max(np.abs(deriv[5:-5]))))
    return tuple(bounds)


CHI_DERIVATIVE_BOUNDS = _derivative_bounds()


def radial_chi(x, n: float = 1.0):
    """``chi(|x| / n)`` for points of shape ``(..., d)``."""
    return chi(np.linalg.norm(x, axis=-1) / n)


def radial_chi_gradient(x, n: float = 1.0):
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    safe = np.where(r > 0, r, 1.0)
    coef = chi_derivative(r / n) / (n * safe)
    return coef[..., None] * x


@lru_cache(maxsize=8)
def bump_quadrature(d: int = 1, n_nodes: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for integrating against the unit-mass bump on the unit ball.

    The bump is proportional to ``exp(-1 / (1 - |y|^2))``. Tensor-product
    Gauss-Legendre nodes on ``[-1, 1]^d``; weights are normalized so that the
    discrete mass is exactly one. Nodes outside the ball are dropped.
    """
    g, w = np.polynomial.legendre.leggauss(n_nodes)
    mesh = np.stack(np.meshgrid(*([g] * d), indexing="ij"), axis=-1).reshape(-1, d)
    wts = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
    r2 = np.sum(mesh ** 2, axis=1)
    inside = r2 < 1.0
    bump = np.exp(-1.0 / (1.0 - r2[inside]))
    weights = wts[inside] * bump
    weights /= weights.sum()
    nodes = mesh[inside]
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights
