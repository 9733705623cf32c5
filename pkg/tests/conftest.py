import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from jumpfilter.families import make_family
from jumpfilter.grid import GridDensity, gaussian_density

settings.register_profile(
    "default", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def std_normal_grid():
    """N(0,1) on [-10, 10] with h = 0.01."""
    return GridDensity.on_box(10.0, 0.01, fn=lambda x: gaussian_density(x, 1.0))


@pytest.fixture
def smooth_bump():
    """A compactly supported, non-symmetric smooth function on [-6, 6]."""

    def fn(x):
        s = x[..., 0]
        inside = np.abs(s) < 3
        val = np.zeros_like(s)
        val[inside] = np.exp(-1.0 / (1.0 - (s[inside] / 3) ** 2)) * (1.0 + 0.3 * np.sin(2 * s[inside]))
        return val

    return GridDensity.on_box(6.0, 0.01, fn=fn)


@pytest.fixture
def benchmark():
    return make_family("bounded_benchmark")


def sample_points(n: int, lo: float = -5.0, hi: float = 5.0, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(lo, hi, size=(n, 1))


def pairing(grid, a, b) -> float:
    """Riemann-sum inner product of two node arrays on ``grid``."""
    return float(np.sum(np.asarray(a) * np.asarray(b)) * grid.cell_volume)
