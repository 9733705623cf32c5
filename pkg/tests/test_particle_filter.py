import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from jumpfilter.families import make_family
from jumpfilter.grid import GridDensity
from jumpfilter.model import CoefficientSet, batch_shape
from jumpfilter.particle_filter import (DegenerateWeightsError, ParticleEnsemble, estimate, propagate, resample,
                                        run_particle_filter, sample_grid_density, systematic_indices,
                                        update_weights)
from jumpfilter.sde_sim import ObservationRecord, extract_observation_noise, gamma_path, simulate_ensemble, \
    simulate_joint


def constant_B(beta: float) -> CoefficientSet:
    return CoefficientSet.zero().replace(B=lambda t, x, y: np.full(batch_shape(x, y) + (1,), beta),
                                         benign_B_zero=False)


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def test_zero_coefficients_leave_particles_in_place():
    ens = ParticleEnsemble.from_positions(np.linspace(-1, 1, 11))
    start = ens.positions.copy()
    rng = philox(0)
    c = make_family("zero")
    for _ in range(20):
        propagate(ens, c, np.array([0.3]), [], 0.01, rng)
        update_weights(ens, c, np.array([0.3]), 0.01)
    np.testing.assert_array_equal(ens.positions, start)
    np.testing.assert_array_equal(ens.logw, 0.0)


def test_common_jump_shifts_every_particle():
    c = CoefficientSet.zero().replace(
        xi=lambda t, x, y, z: np.broadcast_to(z, np.asarray(x).shape) + 0.0 * x,
        nu1=make_family("jump_only").nu1)
    ens = ParticleEnsemble.from_positions(np.linspace(-2, 2, 9))
    start = ens.positions.copy()
    # compensator drift is -int xi dnu1 = -0.5 * rate per unit time; keep dt tiny
    propagate(ens, c, np.zeros(1), [(0.5e-12, np.array([0.5]), np.zeros(1))], 1e-12, philox(1))
    np.testing.assert_allclose(ens.positions, start + 0.5, atol=1e-11)


def test_without_B_particles_follow_the_signal_law():
    c = make_family("ou", theta=0.7)
    n, T, dt = 20_000, 1.0, 1e-2
    obs = ObservationRecord.empty(int(T / dt), dt)
    res = run_particle_filter(c, np.full(n, 0.5), obs, n, seed=3)
    ref = simulate_ensemble(c, [0.5, 0.0], T, dt, n, seed=4)
    assert ks_2samp(res.ensemble.positions[:, 0], ref.X_T[:, 0]).statistic <= 0.03
    # weights never move when B vanishes
    np.testing.assert_array_equal(res.ensemble.logw, 0.0)
    np.testing.assert_allclose(res.mu_one, 1.0)


def test_constant_B_keeps_weights_equal():
    c = constant_B(0.8)
    ens = ParticleEnsemble.from_positions(np.random.default_rng(0).normal(size=50))
    rng = philox(2)
    for k in range(30):
        dv = np.array([0.1 * np.sin(k)])
        propagate(ens, c, dv, [], 0.01, rng)
        update_weights(ens, c, dv, 0.01)
    assert np.ptp(ens.logw) == 0.0
    np.testing.assert_allclose(ens.normalized_weights(), 1 / 50, rtol=1e-14)


def test_pinned_particle_has_inverse_gamma_weight(benchmark):
    dt = 1e-3
    p = simulate_joint(benchmark, [0.3, 0.0], 1.0, dt, seed=12)
    B = benchmark.B(0.0, p.X[:-1], p.Y[:-1])
    dVQ = p.noise.dV + B * dt
    ens = ParticleEnsemble.from_positions(p.X[:1])
    for k in range(p.noise.n_steps):
        # hold the particle on the true signal path
        ens.prev_positions = p.X[k:k + 1]
        ens.t = (k + 1) * dt
        update_weights(ens, benchmark, dVQ[k], dt, p.Y[k])
    g = gamma_path(p, benchmark)[-1]
    assert np.exp(ens.logw[0]) == pytest.approx(1.0 / g, rel=1e-12)


def test_normalization_chain(benchmark):
    p = simulate_joint(benchmark, [0.0, 0.0], 0.5, 1e-3, seed=5)
    obs = extract_observation_noise(p, benchmark)
    res = run_particle_filter(benchmark, np.zeros(400), obs, 400, seed=6)
    est = estimate(res.ensemble)
    assert est.P_phi == 1.0
    assert est.mu_one * est.gamma_o == pytest.approx(1.0, rel=1e-14)
    np.testing.assert_allclose(res.mu_one * res.gamma_o, 1.0, rtol=1e-14)
    # mu(phi) = mu(1) P(phi)
    sq = estimate(res.ensemble, lambda x: x[:, 0] ** 2)
    assert sq.mu_phi == pytest.approx(sq.mu_one * sq.P_phi, rel=1e-14)


def test_density_estimate_integrates_to_one():
    ens = ParticleEnsemble.from_positions(np.random.default_rng(1).normal(size=500))
    est = estimate(ens, grid=GridDensity.on_box(8.0, 0.02), eps=0.01)
    assert est.density.integral() == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(ValueError):
        estimate(ens, grid=GridDensity.on_box(8.0, 0.02))


# resampling -------------------------------------------------------------


def test_resample_uniform_weights_is_identity():
    ens = ParticleEnsemble.from_positions(np.arange(10.0))
    resample(ens, philox(0), force=True)
    np.testing.assert_array_equal(ens.positions[:, 0], np.arange(10.0))


def test_resample_all_mass_on_one_particle():
    ens = ParticleEnsemble.from_positions(np.arange(8.0))
    ens.logw = np.full(8, -np.inf)
    ens.logw[3] = 0.0
    log_one = ens.log_total_mass()
    resample(ens, philox(1))
    np.testing.assert_array_equal(ens.positions[:, 0], 3.0)
    assert ens.log_total_mass() == pytest.approx(log_one)
    assert ens.n_resamples == 1


def test_resample_skipped_above_threshold():
    ens = ParticleEnsemble.from_positions(np.arange(6.0))
    ens.logw = np.array([0.0, 0.1, 0.0, -0.1, 0.0, 0.05])
    before = ens.logw.copy()
    resample(ens, philox(2), threshold=0.5)
    np.testing.assert_array_equal(ens.logw, before)


def test_resampling_keeps_total_mass_unbiased(benchmark):
    p = simulate_joint(benchmark, [0.0, 0.0], 0.5, 1e-2, seed=7)
    obs = extract_observation_noise(p, benchmark)
    with_rs = np.array([run_particle_filter(benchmark, np.zeros(100), obs, 100, seed=s,
                                            resample_threshold=1.1).mu_one[-1] for s in range(100)])
    without = np.array([run_particle_filter(benchmark, np.zeros(100), obs, 100, seed=1000 + s,
                                            resample_threshold=0.0).mu_one[-1] for s in range(100)])
    se = np.sqrt(with_rs.var(ddof=1) / 100 + without.var(ddof=1) / 100)
    assert abs(with_rs.mean() - without.mean()) <= 3 * se


@given(w=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40).filter(lambda v: sum(v) > 1e-6),
       seed=st.integers(0, 2 ** 32 - 1))
def test_systematic_counts_within_one_of_expectation(w, seed):
    w = np.array(w) / np.sum(w)
    idx = systematic_indices(w, np.random.default_rng(seed))
    counts = np.bincount(idx, minlength=w.size)
    assert counts.sum() == w.size
    assert np.all(np.abs(counts - w.size * w) < 1 + 1e-9)


def test_zero_mass_is_reported():
    ens = ParticleEnsemble.from_positions(np.zeros(3))
    ens.logw[:] = -np.inf
    with pytest.raises(DegenerateWeightsError):
        ens.log_total_mass()


# driver --------------------------------------------------------------------


def test_seed_reproducibility(benchmark):
    p = simulate_joint(benchmark, [0.0, 0.0], 0.3, 1e-3, seed=8)
    obs = extract_observation_noise(p, benchmark)
    a = run_particle_filter(benchmark, np.zeros(200), obs, 200, seed=9)
    b = run_particle_filter(benchmark, np.zeros(200), obs, 200, seed=9)
    c = run_particle_filter(benchmark, np.zeros(200), obs, 200, seed=10)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.ensemble.positions, b.ensemble.positions)
    assert not np.array_equal(a.mean, c.mean)


def test_batches_pool_to_consistent_mass(benchmark):
    p = simulate_joint(benchmark, [0.0, 0.0], 0.3, 1e-3, seed=8)
    obs = extract_observation_noise(p, benchmark)
    res = run_particle_filter(benchmark, np.zeros(400), obs, 400, seed=2, n_batches=4)
    assert res.ensemble.size == 400
    assert estimate(res.ensemble).mu_one == pytest.approx(res.mu_one[-1], rel=1e-10)
    with pytest.raises(ValueError):
        run_particle_filter(benchmark, np.zeros(400), obs, 400, seed=2, n_batches=3)


def test_callable_initial_law_and_csv(tmp_path, benchmark):
    obs = ObservationRecord.empty(10, 1e-2)
    res = run_particle_filter(benchmark, lambda rng, n: rng.normal(size=n), obs, 64, seed=0,
                              snapshot_times=[0.05])
    assert 0.05 in res.snapshots
    res.to_csv(tmp_path / "pf.csv")
    lines = (tmp_path / "pf.csv").read_text().splitlines()
    assert lines[0] == "t,mu_one,gamma_o,mean,var,se,ess"
    assert len(lines) == 12


def test_sample_grid_density_moments(std_normal_grid):
    x = sample_grid_density(std_normal_grid, np.random.default_rng(0), 40_000)
    assert abs(x.mean()) <= 3 / np.sqrt(40_000)
    assert x.var() == pytest.approx(1.0, abs=0.03)
