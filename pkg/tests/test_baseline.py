import numpy as np
import pytest

from tss.baseline import (
    DisconnectedOverlap,
    counting_pair_run,
    diff_variance,
    lyapunov_rate,
    mbar_solve,
    meanfield_ode,
    overlap_matrix,
    pair_drift,
    pair_drift_closed_form,
    pair_pi_steady,
    sams_mode,
    three_state_chain,
    three_state_integrated_cov,
    var_mbar,
    var_tss_uniform,
)
from tss.models import make_gaussian_ladder, make_identical_pair, make_uniform_pair


def _pair_samples(family, n, seed):
    rng = np.random.default_rng(seed)
    samples = {}
    for k in range(2):
        x = family.sample_exact(np.full(n, k), rng)
        samples[k] = family.energies(x, np.arange(2))
    return samples


def test_mbar_identical_pair_zero_difference():
    family = make_identical_pair()
    samples = _pair_samples(family, 5000, 0)
    f = mbar_solve(samples)
    assert abs(f[1] - f[0]) < 1e-12


def test_mbar_uniform_pair_matches_truth_within_asymptotic_error():
    family = make_uniform_pair(0.1)
    n = 10**6
    samples = _pair_samples(family, n, 42)
    f = mbar_solve(samples)
    sigma = np.sqrt(16.0 / (2 * n))  # asymptotic variance over total samples
    assert abs(f[1] - f[0]) < 3.0 * sigma


def test_mbar_gauge_invariance_under_sample_shift():
    family = make_uniform_pair(0.2)
    samples = _pair_samples(family, 2000, 7)
    f0 = mbar_solve(samples)
    shifted = {k: v.copy() for k, v in samples.items()}
    shifted[0][10, :] += 3.7  # one sample's energies shifted by a constant
    f1 = mbar_solve(shifted)
    assert np.allclose(f0, f1, atol=5e-3)


def test_mbar_disconnected_overlap():
    u0 = np.column_stack([np.zeros(50), np.full(50, np.inf)])
    u1 = np.column_stack([np.full(50, np.inf), np.zeros(50)])
    with pytest.raises(DisconnectedOverlap):
        mbar_solve({0: u0, 1: u1})


def test_overlap_matrix_uniform_pair_quadrature():
    for delta in (0.05, 0.1, 0.25):
        family = make_uniform_pair(delta)
        O = overlap_matrix(family, [0.5, 0.5])
        assert abs(O[0, 1] - 2.0 * delta) < 1e-8
        pi = np.array([0.5, 0.5])
        assert np.allclose(O @ pi, 1.0, atol=1e-8)  # row identity
        # eigen identity for the symmetrized overlap
        sqrt_pi = np.sqrt(pi)
        M = sqrt_pi[:, None] * O * sqrt_pi[None, :]
        assert np.allclose(M @ sqrt_pi, sqrt_pi, atol=1e-8)


def test_overlap_matrix_identical_pair_all_ones():
    family = make_identical_pair()
    O = overlap_matrix(family, [0.5, 0.5])
    assert np.allclose(O, 1.0, atol=1e-10)


def test_overlap_matrix_monte_carlo_agrees():
    family = make_uniform_pair(0.1)
    O = overlap_matrix(family, [0.5, 0.5], method="monte_carlo", n=200000,
                       rng=np.random.default_rng(3))
    assert abs(O[0, 1] - 0.2) < 0.01


def test_var_mbar_uniform_pair_value():
    family = make_uniform_pair(0.1)
    O = overlap_matrix(family, [0.5, 0.5])
    cov = var_mbar(O, [0.5, 0.5])
    assert abs(diff_variance(cov, 0, 1) - 16.0) < 1e-6


def test_var_mbar_matches_two_state_closed_form():
    # (1/(pi1*pi2)) * (1/O12 - 1) for arbitrary two-rung instances
    rng = np.random.default_rng(1)
    for _ in range(20):
        o12 = rng.uniform(0.05, 0.95)
        pi1 = rng.uniform(0.2, 0.8)
        pi = np.array([pi1, 1.0 - pi1])
        # build a valid overlap matrix from the row identity O @ pi = 1
        o11 = (1.0 - o12 * pi[1]) / pi[0]
        o22 = (1.0 - o12 * pi[0]) / pi[1]
        O = np.array([[o11, o12], [o12, o22]])
        cov = var_mbar(O, pi)
        expected = (1.0 / (pi[0] * pi[1])) * (1.0 / o12 - 1.0)
        assert np.isclose(diff_variance(cov, 0, 1), expected, rtol=1e-10)


def test_var_mbar_identical_zero():
    O = np.ones((2, 2))
    cov = var_mbar(O, [0.5, 0.5])
    assert abs(diff_variance(cov, 0, 1)) < 1e-10


def test_var_tss_uniform_closed_form_values():
    assert np.isclose(var_tss_uniform(0.1, 1), 28.8, atol=1e-12)
    assert np.isclose(var_tss_uniform(0.1, 2), 14.577777777777778, atol=1e-12)
    assert np.isclose(var_tss_uniform(0.1, 4), 7.640108401084011, atol=1e-10)
    # the self-adjustment limit removes the overlap penalty entirely
    assert np.isclose(var_tss_uniform(0.1, 500), 3.2, atol=1e-10)


def test_variance_ordering_against_offline_estimator():
    for delta in (0.05, 0.1, 0.2):
        family = make_uniform_pair(delta)
        O = overlap_matrix(family, [0.5, 0.5])
        offline = diff_variance(var_mbar(O, [0.5, 0.5]), 0, 1)
        assert var_tss_uniform(delta, 1) > offline
        assert var_tss_uniform(delta, 2) < offline


def test_three_state_chain_matches_integrated_covariance():
    for nu in (1, 2):
        y = three_state_chain(0.1, nu, 10**6, seed=8)
        assert abs(y.mean()) < 0.02
        var = np.var(y)
        lag_sum = 0.0
        max_lag = 200
        for lag in range(1, max_lag):
            lag_sum += np.mean(y[:-lag] * y[lag:])
        expected = three_state_integrated_cov(0.1, nu)
        assert abs(lag_sum - expected) / expected < 0.05
        total = var + 2 * lag_sum
        assert abs(total - var_tss_uniform(0.1, nu)) / var_tss_uniform(0.1, nu) < 0.05


def test_pair_drift_closed_form_matches_pipeline():
    for eta in (0.5, 2.0, 4.0):
        grid = np.linspace(-10.0, 10.0, 401)
        pi = pair_pi_steady(grid, eta)
        drift = pair_drift(grid, pi)
        closed = pair_drift_closed_form(grid, eta)
        assert np.max(np.abs(drift - closed)) < 1e-12


def test_pair_drift_antisymmetric_and_reference_value():
    grid = np.linspace(0.0, 10.0, 101)
    for eta in (0.0, 1.0, 2.0):
        g_plus = pair_drift_closed_form(grid, eta)
        g_minus = pair_drift_closed_form(-grid, eta)
        assert np.allclose(g_plus, -g_minus, atol=1e-13)
    assert abs(pair_drift_closed_form(np.array(1.0), 2.0) - (-1.0855)) < 1e-3
    assert pair_drift_closed_form(np.array(0.0), 2.0) == 0.0


def test_lyapunov_rate_monotone_in_eta_along_trajectories():
    rng = np.random.default_rng(12)
    gamma = rng.random(4) + 0.3
    gamma /= gamma.sum()
    z_star = np.exp(rng.normal(size=4))
    z0 = np.exp(rng.normal(size=4) * 2.0)
    etas = [0.0, 1.0, 2.0, 4.0]
    for eta_dyn in etas:
        _, path = meanfield_ode(z0, z_star, gamma, eta_dyn, t_end=20.0, dt=1e-3, sample_every=500)
        for z in path:
            rates = [lyapunov_rate(z_star / z, gamma, eta) for eta in etas]
            x = z_star / z
            at_equilibrium = np.max(np.abs(x / x.mean() - 1.0)) < 1e-9
            for a, b in zip(rates, rates[1:]):
                assert b <= a + 1e-12
            assert rates[0] <= 1e-12
            if not at_equilibrium:
                assert rates[-1] < rates[0] + 1e-15


def test_meanfield_ode_matches_pair_closed_form():
    # two-rung flow in Z coordinates reproduces the closed-form drift of the difference
    eta = 2.0
    gamma = np.array([0.5, 0.5])
    z_star = np.ones(2)
    delta0 = 3.0
    z0 = np.array([1.0, np.exp(-delta0)])
    times, path = meanfield_ode(z0, z_star, gamma, eta, t_end=2.0, dt=1e-4, sample_every=2000)
    deltas = np.log(path[:, 0] / path[:, 1])
    # integrate the scalar closed form on the same grid
    d = delta0
    scalar = [d]
    dt = 1e-4
    for _ in range(int(2.0 / dt)):
        k1 = pair_drift_closed_form(np.array(d), eta)
        k2 = pair_drift_closed_form(np.array(d + 0.5 * dt * k1), eta)
        k3 = pair_drift_closed_form(np.array(d + 0.5 * dt * k2), eta)
        k4 = pair_drift_closed_form(np.array(d + dt * k3), eta)
        d = d + dt / 6.0 * float(k1 + 2 * k2 + 2 * k3 + k4)
    assert abs(deltas[-1] - d) < 1e-6


def test_counting_pair_concentrates():
    final = counting_pair_run(20000, [0, 1, 2, 3])
    assert np.all(np.abs(final) < 0.2)


def test_sams_mode_rewrites_and_is_idempotent():
    cfg = {"eta": 4.0, "alpha": 0.19, "nu": 8, "windows": {"mode": "pattern", "size": 4}, "seed": 3}
    reduced = sams_mode(cfg)
    assert reduced["eta"] == 0.0 and reduced["alpha"] == 0.0 and reduced["nu"] == 1
    assert reduced["windows"] == {"mode": "full_double"}
    assert reduced["seed"] == 3
    assert sams_mode(reduced) == reduced


def test_uniform_pair_has_no_fisher_density():
    # hard walls: the gradient observables are undefined, hence the fixed override
    family = make_uniform_pair(0.1)
    from tss.rung_density import grad_lambda

    g = grad_lambda(family, 0, np.array([0.0]))
    assert not np.isfinite(g[0])
