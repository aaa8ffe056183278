import numpy as np
import pytest
from dataclasses import replace

from aiclinician.diagnostics import vasopressor_exposure
from aiclinician.errors import DataError
from aiclinician.estimate import terminal_rewards
from aiclinician.ingest import write_trajectories
from aiclinician.mdp import empirical_start_distribution, policy_evaluation, start_value
from aiclinician.ope import trajectory_returns
from aiclinician.policy import DeterministicPolicy, StochasticPolicy
from aiclinician.simgen import (
    GeneratorConfig,
    absorption_probabilities,
    calibrate_vaso_exposure,
    default_world,
    generate_cohort,
    make_confounded_world,
    oracle_mortality,
    oracle_policy_value,
    oracle_vaso_exposure,
    simulate,
    simulate_chain,
)


def test_zero_patients():
    assert generate_cohort(default_world(n_patients=0)) == []


def test_fixed_seed_byte_identical(tmp_path):
    cfg = default_world(n_states_true=6, n_patients=50, seed=9, fast_dynamics=True)
    write_trajectories(generate_cohort(cfg), tmp_path / "a.csv")
    write_trajectories(generate_cohort(cfg), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_patient_streams_independent_of_cohort_size():
    a = generate_cohort(default_world(n_states_true=6, n_patients=20, seed=2))
    b = generate_cohort(default_world(n_states_true=6, n_patients=40, seed=2))
    assert a[5].time_h.size == b[5].time_h.size and np.array_equal(a[5].features, b[5].features)


def test_outcome_rate_matches_oracle_mortality():
    cfg = default_world(n_patients=10_000, seed=1)
    died = np.mean([t.outcome.died for t in generate_cohort(cfg)])
    assert abs(died - oracle_mortality(cfg)) < 0.02


def _absorbing_world(p_survive):
    n = 2
    T = np.zeros((n, 25, n + 2))
    T[:, :, n] = p_survive
    T[:, :, n + 1] = 1 - p_survive
    B = np.full((n, 25), 1 / 25)
    return GeneratorConfig(
        n_states_true=n, n_patients=10, transitions=T, behavior=B, start_distribution=[0.5, 0.5],
        map_mean=[80, 60], aux_means=np.zeros((n, 0)), aux_noise=np.zeros(0), aux_names=(), gamma=1.0,
    )


def test_oracle_trivial_values():
    assert oracle_policy_value(_absorbing_world(1.0)) == pytest.approx(100)
    assert oracle_policy_value(_absorbing_world(0.5)) == pytest.approx(0, abs=1e-12)


def test_oracle_matches_monte_carlo(small_world):
    cfg = replace(small_world, gamma=0.99)
    rng = np.random.default_rng(0)
    c = simulate_chain(cfg.transitions, cfg.behavior, cfg.start_distribution, 1_000_000, rng)
    g = trajectory_returns(c, terminal_rewards(cfg.n_states_true), 0.99)
    assert abs(g.mean() - oracle_policy_value(cfg)) < 3 * g.std(ddof=1) / np.sqrt(g.size)


def test_oracle_is_bellman_fixed_point(small_world):
    m = small_world.true_model()
    pol = StochasticPolicy(small_world.behavior)
    v = policy_evaluation(m, pol).v
    P = np.einsum("sa,sat->st", small_world.behavior, small_world.transitions)
    assert np.max(np.abs(v[:-2] - P @ (m.reward + m.gamma * v))) <= 1e-10
    assert start_value(v, small_world.start_distribution) == pytest.approx(oracle_policy_value(small_world), abs=1e-8)


def test_confounding_boundaries():
    base = default_world()
    assert make_confounded_world(base, 0.0) is base
    full = make_confounded_world(base, 1.0)
    assert full.behavior[0, 0] == 1.0
    assert full.behavior[-1, 0] == 0.0
    assert np.allclose(full.behavior.sum(axis=1), 1)
    with pytest.raises(ValueError):
        make_confounded_world(base, 1.5)


def test_confounded_world_true_order():
    cfg = make_confounded_world(default_world(), 0.8)
    zero = DeterministicPolicy(np.zeros(cfg.n_states_true, dtype=np.int64))
    assert oracle_policy_value(cfg) > oracle_policy_value(cfg, zero)


def test_config_validation_and_json(tmp_path):
    cfg = default_world(n_states_true=4, n_patients=3)
    cfg.save(tmp_path / "g.json")
    back = GeneratorConfig.load(tmp_path / "g.json")
    assert np.array_equal(back.transitions, cfg.transitions) and back.aux_names == cfg.aux_names
    with pytest.raises(DataError):
        replace(cfg, behavior=cfg.behavior * 2)
    with pytest.raises(DataError):
        replace(cfg, max_horizon_bins=0)


def test_absorption_matches_mortality(small_world):
    surv = absorption_probabilities(small_world)
    assert 1 - small_world.start_distribution @ surv == pytest.approx(oracle_mortality(small_world))


def test_calibrated_exposure_one_third():
    cfg = calibrate_vaso_exposure(default_world(n_patients=10_000, seed=3), 1 / 3)
    assert oracle_vaso_exposure(cfg) == pytest.approx(1 / 3, abs=1e-10)
    assert abs(vasopressor_exposure(generate_cohort(cfg)) - 1 / 3) < 0.02


def test_ground_truth_sequences(small_world):
    sim = simulate(small_world)
    c = sim.to_discretized(small_world.n_states_true)
    assert c.n_patients == small_world.n_patients
    assert c.n_bins == sum(len(s) for s in sim.true_states)
    for t, s in zip(sim.trajectories, sim.true_states):
        assert t.n_records == len(s) * small_world.records_per_step


def test_chain_start_distribution(small_world):
    c = simulate_chain(small_world.transitions, small_world.behavior, small_world.start_distribution,
                       50_000, np.random.default_rng(0))
    assert np.allclose(empirical_start_distribution(c), small_world.start_distribution, atol=0.01)
