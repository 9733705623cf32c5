import numpy as np
import pytest

from jumpfilter.families import make_family
from jumpfilter.pipeline import (ComparisonReport, FilterSummary, InitialLaw, compare, draw_x0,
                                 filter_experiment, required_radius, run_zakai, simulate_truth)
from jumpfilter.zakai import default_radius


@pytest.fixture(scope="module")
def small_run(benchmark_module):
    return filter_experiment(benchmark_module, InitialLaw(0.0, 0.5), T=0.2, dt=1e-3, h=0.05, seed=1,
                             n_particles=2000, output_dt=0.05)


@pytest.fixture(scope="module")
def benchmark_module():
    return make_family("bounded_benchmark")


def test_initial_law_grid_and_samples():
    law = InitialLaw(0.4, 0.25)
    g = law.on_grid(6.0, 0.02)
    assert g.integral() == pytest.approx(1.0, abs=1e-14)
    assert g.mean()[0] == pytest.approx(0.4, abs=1e-10)
    x = law.sample(np.random.default_rng(0), 50_000)
    assert x.shape == (50_000, 1)
    assert abs(x.mean() - 0.4) <= 3 * 0.5 / np.sqrt(50_000)


def test_draw_x0_is_seed_keyed():
    law = InitialLaw()
    assert draw_x0(law, 3) == draw_x0(law, 3)
    assert draw_x0(law, 3) != draw_x0(law, 4)
    assert draw_x0(law, 3, path=0) != draw_x0(law, 3, path=1)


def test_required_radius_adds_jump_reach(benchmark_module):
    law = InitialLaw()
    base = default_radius(benchmark_module, law.effective_radius(), 1.0)
    assert required_radius(benchmark_module, law, 1.0) > base
    heat = make_family("heat")
    assert required_radius(heat, law, 1.0) == pytest.approx(default_radius(heat, law.effective_radius(), 1.0))


def test_compare_identical_grids_is_exact(benchmark_module):
    law = InitialLaw()
    _, obs = simulate_truth(benchmark_module, law, 0.1, 1e-3, seed=2)
    z = run_zakai(benchmark_module, law, obs, 0.05, 8.0, 0.05)
    rep = compare(z, z)
    np.testing.assert_array_equal(rep.gap, 0.0)
    np.testing.assert_allclose(rep.l1_gap, 0.0, atol=1e-15)
    assert rep.passed


def test_compare_rejects_misaligned_times(benchmark_module):
    law = InitialLaw()
    _, obs = simulate_truth(benchmark_module, law, 0.1, 1e-3, seed=2)
    a = run_zakai(benchmark_module, law, obs, 0.05, 8.0, 0.05)
    b = run_zakai(benchmark_module, law, obs, 0.05, 8.0, 0.02)
    with pytest.raises(ValueError):
        compare(a, b)
    with pytest.raises(TypeError):
        FilterSummary.of("not a result")


def test_z_scores_handle_zero_se():
    rep = ComparisonReport(np.arange(3.0), np.array([0.0, 1.0, 1.0]), np.array([0.0, 0.0, 0.5]),
                           np.array([0.0, 0.0, 1.0]), np.zeros(3))
    np.testing.assert_array_equal(rep.z, [0.0, np.inf, 0.5])
    assert not rep.passed


def test_small_experiment(small_run, tmp_path):
    run = small_run
    rep = run.report
    np.testing.assert_allclose(rep.times, [0.0, 0.05, 0.1, 0.15, 0.2], atol=1e-12)
    # particle clouds are snapshotted after steps, so the t = 0 gap is undefined
    assert np.isnan(rep.l1_gap[0]) and np.all(np.isfinite(rep.l1_gap[1:]))
    assert np.all(rep.l1_gap[1:] <= 0.1)
    assert np.all(rep.se > 0)
    assert rep.passed
    np.testing.assert_allclose(run.zakai.mass * run.zakai.gamma_o, 1.0, rtol=1e-14)
    np.testing.assert_allclose(run.particles.mu_one * run.particles.gamma_o, 1.0, rtol=1e-14)
    assert run.zakai_check is not None
    rep.to_csv(tmp_path / "cmp.csv")
    assert (tmp_path / "cmp.csv").read_text().splitlines()[0] == "t,mean_pf,mean_zakai,se,L1_density_gap"


def test_unknown_method_rejected(benchmark_module):
    with pytest.raises(ValueError, match="unknown filter method"):
        filter_experiment(benchmark_module, InitialLaw(), 0.1, 1e-3, 0.05, seed=0, method="kalman")


def test_single_method_runs(benchmark_module):
    run = filter_experiment(benchmark_module, InitialLaw(), 0.05, 1e-3, 0.05, seed=0, n_particles=100,
                            output_dt=0.05, method="particle")
    assert run.zakai is None and run.report is None
    assert run.particles.mean.shape == (2,)
