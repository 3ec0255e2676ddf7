import numpy as np
import pytest

from conftest import frozen_pair_weights, frozen_weights_from_global
from tss.models import ModelFamily, RungGrid, make_gaussian_ladder, make_identical_pair, make_uniform_pair
from tss.rngstream import ReplicaStreams
from tss.sampler import (
    DegenerateDistribution,
    ReplicaState,
    SamplingWeights,
    run_cycle,
    rung_log_probs,
    rung_move,
    window_swap,
)
from tss.windows import build_layout


def test_window_swap_and_involution():
    layout = build_layout(16, {"mode": "explicit", "members": [list(range(16)), list(range(8)), list(range(8, 16))]})
    weights = frozen_weights_from_global(layout, np.zeros(16))
    state = ReplicaState(x=np.zeros((1, 1)), k=np.array([[7]]), j=np.array([[0]]))
    new_j, held, dest = window_swap(state, layout, weights)
    assert not held[0, 0] and new_j[0, 0] == 1 and dest[0, 0] == 1
    state2 = ReplicaState(state.x, state.k, new_j)
    back_j, _, _ = window_swap(state2, layout, weights)
    assert back_j[0, 0] == 0


def test_window_swap_holds_when_destination_undefined(pair_layout):
    weights = SamplingWeights.undefined(pair_layout, batch=1)
    weights.defined[0, 0] = True  # only the current window has estimates
    weights.log_pi[0] = np.log([[0.5, 0.5]])
    weights.F[0] = np.zeros((1, 2))
    state = ReplicaState(x=np.zeros((1, 1)), k=np.array([[0]]), j=np.array([[0]]))
    new_j, held, dest = window_swap(state, pair_layout, weights)
    assert held[0, 0] and new_j[0, 0] == 0 and dest[0, 0] == 1


def test_hold_skips_rung_moves_but_state_moves(pair_layout):
    family = make_uniform_pair(0.1)
    weights = SamplingWeights.undefined(pair_layout, batch=1)
    streams = ReplicaStreams([0], 1)
    state = ReplicaState(x=np.array([[-0.5]]), k=np.array([[0]]), j=np.array([[0]]))
    new_state, record = run_cycle(state, weights, pair_layout, family, nu=3, n_md=0, streams=streams)
    assert record.held[0, 0]
    assert new_state.k[0, 0] == 0 and new_state.j[0, 0] == 0
    assert new_state.x[0, 0] != -0.5  # state moves still ran
    assert record.window[0, 0] == 1  # energies recorded for the attempted destination
    assert 1 in record.energies


def test_rung_move_uniform_overlap_frequencies(pair_layout):
    family = make_uniform_pair(0.1)
    weights = frozen_pair_weights(pair_layout, batch=100000)
    n = 100000
    state = ReplicaState(x=np.zeros((n, 1)), k=np.zeros((n, 1), dtype=int), j=np.zeros((n, 1), dtype=int))
    streams = ReplicaStreams(range(4), 1)
    rng = np.random.default_rng(0)
    with np.errstate(divide="ignore"):
        gumbels = -np.log(-np.log(rng.random((n, 1, 2))))
    k = rung_move(state, weights, family, pair_layout, gumbels)
    frac = k.mean()
    assert abs(frac - 0.5) < 5.0 / (2.0 * np.sqrt(n))  # each rung with probability 1/2


def test_rung_move_forced_outside_overlap(pair_layout):
    family = make_uniform_pair(0.1)
    weights = frozen_pair_weights(pair_layout, batch=64)
    state = ReplicaState(x=np.full((64, 1), 0.5), k=np.ones((64, 1), dtype=int), j=np.zeros((64, 1), dtype=int))
    rng = np.random.default_rng(1)
    with np.errstate(divide="ignore"):
        gumbels = -np.log(-np.log(rng.random((64, 1, 2))))
    k = rung_move(state, weights, family, pair_layout, gumbels)
    assert np.all(k == 1)  # the competing weight is exp(-inf) = 0


def test_rung_log_probs_identical_pair_closed_form(pair_layout):
    family = make_identical_pair()
    for delta in (-2.0, -0.5, 0.0, 0.5, 2.0):
        weights = frozen_pair_weights(pair_layout, F=(0.0, delta))
        energies = family.energies(np.array([[0.3]]), pair_layout.members[0])
        logp = rung_log_probs(weights, 0, energies)
        expected = 1.0 / (1.0 + np.exp(-delta))
        assert np.allclose(np.exp(logp[0, 0, 1]), expected, rtol=1e-12)


def test_self_adjustment_sign_by_enumeration(pair_layout):
    # the expected one-step increment of the counting recursion opposes the error
    family = make_identical_pair()
    energies = family.energies(np.array([[0.5]]), pair_layout.members[0])
    for delta in (-3.0, -1.0, -0.1, 0.1, 1.0, 3.0):
        weights = frozen_pair_weights(pair_layout, F=(0.0, delta))
        logp = rung_log_probs(weights, 0, energies)
        p1, p2 = np.exp(logp[0, 0])
        expected_increment = 2.0 * (2.0 * p1 - 1.0)  # gain factor omitted (positive)
        assert np.sign(expected_increment) == -np.sign(delta)


def test_degenerate_distribution_raises():
    # a window whose rungs all have infinite energy at the current point
    grid = RungGrid(np.array([0.0, 1.0]), np.ones(2), ((0, 1),))

    def energy_fn(rungs, x):
        return np.full(x.shape + (len(rungs),), np.inf)

    family = ModelFamily(
        name="wall", grid=grid, energy_fn=energy_fn,
        draw_kind="uniform", exact_transform=lambda k, z: z,
    )
    layout = build_layout(2, {"mode": "full_double"})
    weights = frozen_pair_weights(layout)
    state = ReplicaState(x=np.zeros((1, 1)), k=np.zeros((1, 1), dtype=int), j=np.zeros((1, 1), dtype=int))
    gumbels = np.zeros((1, 1, 2))
    with pytest.raises(DegenerateDistribution):
        rung_move(state, weights, family, layout, gumbels)


def test_unestimated_rungs_hold_instead_of_raising(pair_layout):
    family = make_uniform_pair(0.1)
    weights = frozen_pair_weights(pair_layout, F=(np.inf, 0.0))
    # x only in rung 0's support, but rung 0 has no estimate: keep the rung
    state = ReplicaState(x=np.full((3, 1), -0.5), k=np.zeros((3, 1), dtype=int), j=np.zeros((3, 1), dtype=int))
    gumbels = np.zeros((3, 1, 2))
    k = rung_move(state, weights, family, pair_layout, gumbels)
    assert np.all(k == 0)


def test_state_move_kernel_composition_and_divisibility():
    grid = RungGrid(np.array([0.0, 1.0]), np.ones(2), ((0, 1),))

    def energy_fn(rungs, x):
        return np.zeros(x.shape + (len(rungs),))

    def kernel(k, x, rng):
        rng.random()
        return x + 1.0

    family = ModelFamily(name="stepper", grid=grid, energy_fn=energy_fn, kernel=kernel)
    layout = build_layout(2, {"mode": "full_double"})
    weights = frozen_pair_weights(layout)
    streams = ReplicaStreams([0], 1)
    state = ReplicaState(x=np.zeros((1, 1)), k=np.zeros((1, 1), dtype=int), j=np.zeros((1, 1), dtype=int))
    new_state, _ = run_cycle(state, weights, layout, family, nu=3, n_md=6, streams=streams)
    assert new_state.x[0, 0] == 6.0  # three state moves of two kernel steps each
    with pytest.raises(ValueError):
        run_cycle(state, weights, layout, family, nu=4, n_md=6, streams=streams)


def test_energy_record_matches_final_state(pair_layout):
    family = make_uniform_pair(0.2)
    weights = frozen_pair_weights(pair_layout, batch=4)
    streams = ReplicaStreams(range(4), 1)
    state = ReplicaState(x=np.zeros((4, 1)), k=np.zeros((4, 1), dtype=int), j=np.zeros((4, 1), dtype=int))
    new_state, record = run_cycle(state, weights, pair_layout, family, nu=2, n_md=0, streams=streams)
    assert np.array_equal(record.k, new_state.k)
    for j in record.present_windows():
        expected = family.energies(new_state.x, pair_layout.members[j])
        assert np.array_equal(record.energies[j], expected)


def test_replica_streams_independent_of_replica_count():
    a = ReplicaStreams([11], 2)
    b = ReplicaStreams([11], 3)
    ua = a.uniform(64)
    ub = b.uniform(64)
    assert np.array_equal(ua[:, :2], ub[:, :2])  # adding replicas does not perturb streams


def test_replica_streams_take_split_preserves_sequence():
    a = ReplicaStreams([3], 1)
    b = ReplicaStreams([3], 1)
    big = a.uniform(3000)[0, 0]
    parts = np.concatenate([b.uniform(n)[0, 0] for n in (700, 700, 700, 700, 200)])
    assert np.array_equal(big, parts)


def test_frozen_stationarity_matches_exact_chain():
    """Empirical (rung, window) occupancy under frozen weights matches the
    stationary law of the exactly enumerated cycle chain."""
    from scipy import integrate

    family = make_gaussian_ladder(7)
    members = [list(range(8)), list(range(4)), list(range(4, 8))]
    layout = build_layout(8, {"mode": "explicit", "members": members})
    rng = np.random.default_rng(5)
    F_global = rng.normal(scale=0.4, size=8)
    weights = frozen_weights_from_global(layout, F_global, batch=16)

    # exact transition matrix over (k, j) states by quadrature
    states = [(k, j) for k in range(8) for j in layout.win[k]]
    index = {s: i for i, s in enumerate(states)}
    T = np.zeros((len(states), len(states)))
    for (k, j), i in index.items():
        a, b = layout.win[k]
        j2 = a + b - j  # deterministic swap
        mem = layout.members[j2]
        logits = np.log(np.exp(weights.log_pi[j2][0])) + weights.F[j2][0]

        def prob_vector(x):
            e = family.energies(np.asarray(x), mem)
            z = logits - e
            z = z - z.max()
            w = np.exp(z)
            return w / w.sum()

        for idx, k2 in enumerate(mem):
            val, _ = integrate.quad(
                lambda x: prob_vector(x)[idx] * np.exp(-0.5 * (x - k) ** 2) / np.sqrt(2 * np.pi),
                k - 8.0, k + 8.0, limit=200,
            )
            T[i, index[(int(k2), int(j2))]] += val
    # stationary distribution by power iteration
    pi_chain = np.full(len(states), 1.0 / len(states))
    for _ in range(20000):
        new = pi_chain @ T
        if np.max(np.abs(new - pi_chain)) < 1e-14:
            pi_chain = new
            break
        pi_chain = new

    # empirical occupancy over independent chains (B chains, CLT across chains)
    from tss.rngstream import ReplicaStreams

    B, cycles = 16, 40000
    streams = ReplicaStreams(range(B), 1)
    state = ReplicaState(
        x=family.sample_exact(np.zeros((B, 1), dtype=int), np.random.default_rng(0)),
        k=np.zeros((B, 1), dtype=int),
        j=np.zeros((B, 1), dtype=int),
    )
    counts = np.zeros((B, len(states)))
    for _ in range(cycles):
        state, record = run_cycle(state, weights, layout, family, nu=1, n_md=0, streams=streams)
        for (k, j), i in index.items():
            counts[:, i] += ((state.k[:, 0] == k) & (state.j[:, 0] == j))
    freq = counts / cycles
    mean = freq.mean(axis=0)
    se = freq.std(axis=0, ddof=1) / np.sqrt(B)
    # conditional law of j given k is 1/2 each
    for k in range(8):
        a, b = layout.win[k]
        pa, pb = mean[index[(k, a)]], mean[index[(k, b)]]
        assert abs(pa - pb) < 4.0 * (se[index[(k, a)]] + se[index[(k, b)]] + 1e-4)
    # per-cell agreement with the enumerated chain
    for (k, j), i in index.items():
        assert abs(mean[i] - pi_chain[i]) < 4.0 * max(se[i], 5e-4), (k, j, mean[i], pi_chain[i])


def test_determinism_identical_runs():
    from tss.config import ExperimentConfig
    from tss.experiment import run_experiment

    cfg = ExperimentConfig(model_name="gaussian_ladder", model_params={"L": 7}, cycles=300,
                           seed=9, eta=2.0, alpha=0.19, gamma="flat_halved_ends",
                           report_every=100, error_every=150)
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    assert np.array_equal(a.state.x, b.state.x)
    assert np.array_equal(a.state.k, b.state.k)
    assert np.array_equal(a.reported.F, b.reported.F, equal_nan=True)
