import math

import numpy as np
import pytest
from scipy.linalg import expm

from mfchaos.dynamics import (
    EXACT,
    ForceMode,
    MeanFieldDrive,
    mean_field_force,
    simulate,
    simulate_replicas,
    step,
    step_kinetic,
    step_overdamped,
)
from mfchaos.model import (
    ConfigError,
    Ensemble,
    InitSpec,
    ModelConfig,
    PotentialSpec,
    RngLineage,
    SimulationBlowUp,
)


def test_zero_coupling_gives_zero_force():
    x = np.random.default_rng(0).normal(size=(20, 1))
    cfg = ModelConfig(kappa=0.0, n_particles=20)
    assert np.all(mean_field_force(Ensemble(0.0, x), cfg).forces == 0.0)


def test_two_particle_force():
    cfg = ModelConfig(kappa=1.0, n_particles=2)
    f = mean_field_force(Ensemble(0.0, np.array([[0.0], [1.0]])), cfg).forces[:, 0]
    assert f[0] == pytest.approx(-0.5 * 0.6065306597126334, rel=1e-14)
    assert f[1] == pytest.approx(0.5 * 0.6065306597126334, rel=1e-14)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_exact_forces_sum_to_zero(d):
    n = 57
    x = np.random.default_rng(d).normal(size=(n, d))
    f = mean_field_force(Ensemble(0.0, x), ModelConfig(kappa=0.7, n_particles=n, d=d)).forces
    assert np.max(np.abs(f.sum(axis=0))) < 1e-13


def test_factored_random_features_close_to_exact():
    n = 1000
    x = np.random.default_rng(5).normal(size=(n, 1))
    cfg = ModelConfig(kappa=1.0, n_particles=n)
    exact = mean_field_force(Ensemble(0.0, x), cfg).forces
    approx = mean_field_force(Ensemble(0.0, x), cfg, ForceMode.factored(4096, feature_seed=1))
    assert np.max(np.abs(approx.forces - exact)) < 1e-2
    assert approx.error_bound > 0


def test_factored_lattice_features_close_to_exact():
    n = 500
    x = np.random.default_rng(6).normal(scale=1.1, size=(n, 1))
    assert np.ptp(x) < 7.0
    cfg = ModelConfig(kappa=1.0, n_particles=n)
    exact = mean_field_force(Ensemble(0.0, x), cfg).forces
    approx = mean_field_force(Ensemble(0.0, x), cfg, ForceMode.factored(16, sampling="lattice"))
    assert np.max(np.abs(approx.forces - exact)) < 1e-9
    assert approx.error_bound < 1e-9


def test_factored_mode_rejected_for_fourier_potential():
    cfg = ModelConfig(potential=PotentialSpec.fourier([(0.5, (1.0,)), (0.5, (-1.0,))]), n_particles=3)
    with pytest.raises(ConfigError):
        mean_field_force(Ensemble(0.0, np.zeros((3, 1))), cfg, ForceMode.factored(8))


def test_finite_fourier_force_matches_pairwise_sum():
    spec = PotentialSpec.fourier([(0.5, (1.0,)), (0.5, (-1.0,)), (0.2, (3.0,)), (0.2, (-3.0,))])
    n = 30
    x = np.random.default_rng(2).normal(size=(n, 1))
    cfg = ModelConfig(potential=spec, kappa=0.8, n_particles=n)
    f = mean_field_force(Ensemble(0.0, x), cfg).forces[:, 0]
    r = x[:, 0][:, None] - x[:, 0][None, :]
    grad = -(np.sin(r) + 1.2 * np.sin(3 * r))
    np.testing.assert_allclose(f, -0.8 * grad.mean(axis=1), atol=1e-14)


def test_kinetic_origin_is_fixed_without_noise():
    cfg = ModelConfig(dynamics="kinetic", kappa=0.0, n_particles=3)
    e = Ensemble(0.0, np.zeros((3, 1)), np.zeros((3, 1)))
    for _ in range(10):
        e = step_kinetic(e, cfg, np.zeros(3))
    assert np.all(e.x == 0.0) and np.all(e.v == 0.0)
    assert e.t == pytest.approx(0.1)


def test_overdamped_mean_decays_exponentially():
    # zero noise isolates the mean ODE of the exact OU step
    cfg = ModelConfig(kappa=0.0, a=1.3, n_particles=4, dt=0.01)
    e = Ensemble(0.0, np.full((4, 1), 2.0))
    for _ in range(100):
        e = step_overdamped(e, cfg, np.zeros(4))
    np.testing.assert_allclose(e.x, 2.0 * math.exp(-1.3), rtol=1e-12)


def test_single_particle_path_ignores_kappa():
    init = InitSpec.gaussian([1.0], 0.25)
    lin = RngLineage(9, 0)
    a = simulate(ModelConfig(kappa=0.0, n_particles=1, t_final=1.0), init, lin, [0.5, 1.0])
    b = simulate(ModelConfig(kappa=0.9, n_particles=1, t_final=1.0), init, lin, [0.5, 1.0])
    for ea, eb in zip(a, b):
        np.testing.assert_array_equal(ea.x, eb.x)


def test_step_dispatch_and_mismatch():
    cfg = ModelConfig(dynamics="kinetic", n_particles=2)
    with pytest.raises(ConfigError):
        step_overdamped(Ensemble(0.0, np.zeros((2, 1)), np.zeros((2, 1))), cfg, np.zeros(2))
    e = step(Ensemble(0.0, np.zeros((2, 1)), np.zeros((2, 1))), cfg, np.ones(2))
    assert e.v is not None


def _kinetic_affine_map(cfg):
    """(A, b) with (x', v') = A (x, v) + b xi for one kappa = 0 step of one particle."""
    cols = []
    for z in ([1.0, 0.0], [0.0, 1.0]):
        e = step_kinetic(Ensemble(0.0, [[z[0]]], [[z[1]]]), cfg, np.zeros(1))
        cols.append([e.x[0, 0], e.v[0, 0]])
    e = step_kinetic(Ensemble(0.0, [[0.0]], [[0.0]]), cfg, np.ones(1))
    return np.array(cols).T, np.array([e.x[0, 0], e.v[0, 0]])


def _exact_second_moments(a, beta, t, m0, s0):
    # d/dt (x, v) = B (x, v) + noise in v with unit diffusion
    b = np.array([[0.0, 1.0], [-a, -beta / 2]])
    q = np.diag([0.0, 1.0])
    n = 2
    big = np.zeros((2 * n, 2 * n))
    big[:n, :n] = b
    big[:n, n:] = q
    big[n:, n:] = -b.T
    e = expm(big * t)
    phi = e[:n, :n]
    cov = phi @ s0 @ phi.T + e[:n, n:] @ phi.T
    mean = phi @ m0
    return cov + np.outer(mean, mean)


def test_kinetic_weak_order():
    # exact law of the linear scheme vs exact OU moments, E[x^2] at T = 1
    a, beta, t = 1.0, 1.0, 1.0
    m0, s0 = np.array([1.0, 0.0]), np.diag([0.25, 1.0])
    exact = _exact_second_moments(a, beta, t, m0, s0)[0, 0]
    errors = []
    for dt in (0.04, 0.02, 0.01):
        cfg = ModelConfig(dynamics="kinetic", kappa=0.0, a=a, beta=beta, dt=dt, n_particles=1)
        amat, bvec = _kinetic_affine_map(cfg)
        mean, cov = m0.copy(), s0.copy()
        for _ in range(round(t / dt)):
            mean = amat @ mean
            cov = amat @ cov @ amat.T + np.outer(bvec, bvec)
        errors.append(abs(cov[0, 0] + mean[0] ** 2 - exact))
    ratios = [errors[0] / errors[1], errors[1] / errors[2]]
    assert all(1.5 <= r <= 4.5 for r in ratios), (errors, ratios)


def test_kinetic_half_steps_agree_to_second_order():
    # deterministic drift: one step of dt vs two of dt/2
    diffs = []
    for dt in (0.04, 0.02, 0.01):
        cfg = ModelConfig(dynamics="kinetic", kappa=0.5, dt=dt, n_particles=5)
        cfg2 = cfg.replace(dt=dt / 2)
        rng = np.random.default_rng(0)
        e0 = Ensemble(0.0, rng.normal(size=(5, 1)), rng.normal(size=(5, 1)))
        one = step_kinetic(e0, cfg, np.zeros(5))
        two = step_kinetic(step_kinetic(e0, cfg2, np.zeros(5)), cfg2, np.zeros(5))
        diffs.append(np.max(np.abs(one.x - two.x)) + np.max(np.abs(one.v - two.v)))
    assert diffs[0] / diffs[1] > 3.5 and diffs[1] / diffs[2] > 3.5, diffs


def test_exchangeability_under_permutation():
    rng = np.random.default_rng(3)
    n = 4
    perm = np.array([2, 0, 3, 1])
    for dyn in ("overdamped", "kinetic"):
        cfg = ModelConfig(dynamics=dyn, kappa=0.6, n_particles=n)
        v = rng.normal(size=(n, 1)) if dyn == "kinetic" else None
        e = Ensemble(0.0, rng.normal(size=(n, 1)), v)
        xi = rng.normal(size=n)
        a = step(e, cfg, xi).permuted(perm)
        b = step(e.permuted(perm), cfg, xi[perm])
        np.testing.assert_allclose(a.x, b.x, atol=1e-14)
        if v is not None:
            np.testing.assert_allclose(a.v, b.v, atol=1e-14)


def _collect(cfg, init, replicas, times, threads, job_size, mode=EXACT, drive=None):
    res = simulate_replicas(cfg, init, 77, replicas, times, lambda ti, t, b: b.phase.copy(), mode=mode,
                            threads=threads, job_size=job_size, drive=drive)
    return np.stack([np.concatenate([job[ti] for job in res]) for ti in range(len(times))])


@pytest.mark.parametrize("dyn", ["overdamped", "kinetic"])
def test_results_independent_of_threads(dyn):
    cfg = ModelConfig(dynamics=dyn, kappa=0.3, n_particles=16, t_final=0.5)
    init = InitSpec.gaussian([1.0] * cfg.phase_dim, 0.25)
    a = _collect(cfg, init, np.arange(12), [0.2, 0.5], threads=1, job_size=5)
    b = _collect(cfg, init, np.arange(12), [0.2, 0.5], threads=3, job_size=5)
    assert a.tobytes() == b.tobytes()


def test_replica_stream_independent_of_batching():
    cfg = ModelConfig(kappa=0.3, n_particles=16, t_final=0.5)
    init = InitSpec.gaussian([1.0], 0.25)
    batch = _collect(cfg, init, np.arange(10), [0.5], threads=1, job_size=10)
    alone = _collect(cfg, init, np.array([7]), [0.5], threads=1, job_size=1)
    assert batch[:, 7].tobytes() == alone[:, 0].tobytes()
    single = simulate(cfg, init, RngLineage(77, 7), [0.5])
    np.testing.assert_array_equal(single[0].x, alone[0, 0])


def test_coupled_particles_equal_system_without_interaction():
    cfg = ModelConfig(kappa=0.0, n_particles=8, t_final=0.3)
    init = InitSpec.gaussian([1.0], 0.25)
    k = 12
    drive = MeanFieldDrive(np.zeros((31, k)), np.zeros((31, k)))
    res = simulate_replicas(cfg, init, 1, np.arange(3), [0.3], lambda ti, t, b: (b.x.copy(), b.xbar.copy()),
                            mode=ForceMode.factored(k, sampling="lattice"), drive=drive)
    x, xbar = res[0][0]
    np.testing.assert_allclose(x, xbar, atol=1e-15)


def test_drive_rejected_for_kinetic():
    cfg = ModelConfig(dynamics="kinetic", n_particles=2)
    init = InitSpec.gaussian([0.0, 0.0], 1.0)
    with pytest.raises(ConfigError):
        simulate_replicas(cfg, init, 0, [0], [0.01], lambda *a: 0, drive=MeanFieldDrive(np.zeros((2, 1)),
                                                                                         np.zeros((2, 1))))


def test_blow_up_reports_time():
    cfg = ModelConfig(dynamics="kinetic", kappa=0.0, a=1.0, dt=3.0, n_particles=2, t_final=300.0)
    init = InitSpec.gaussian([1.0, 0.0], 0.25)
    with pytest.raises(SimulationBlowUp) as info:
        simulate_replicas(cfg, init, 0, [0], [300.0], lambda *a: 0)
    assert info.value.t > 0


def test_no_blow_up_over_long_horizon():
    for dyn in ("overdamped", "kinetic"):
        cfg = ModelConfig(dynamics=dyn, kappa=0.2, n_particles=50, t_final=100.0)
        init = InitSpec.gaussian([1.0] * cfg.phase_dim, 0.25)
        out = simulate(cfg, init, RngLineage(4), [100.0], mode=ForceMode.factored(12, sampling="lattice"))
        assert np.all(np.isfinite(out[0].phase))
        assert np.max(np.abs(out[0].phase)) < 10


def test_output_times_must_be_on_grid():
    cfg = ModelConfig(n_particles=2)
    with pytest.raises(ConfigError):
        simulate_replicas(cfg, InitSpec.gaussian([0.0], 1.0), 0, [0], [0.015], lambda *a: 0)
