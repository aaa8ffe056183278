import numpy as np
import pytest

from aiclinician.ingest import MAP_FEATURE, Outcome, RawTrajectory
from aiclinician.simgen import default_world


def make_raw(pid="p0", times=(0.2, 0.7), map_=None, fluid=None, vaso=None, outcome="survived", extra=None):
    times = np.asarray(times, dtype=float)
    n = times.size
    map_ = np.full(n, 70.0) if map_ is None else np.asarray(map_, dtype=float)
    names = [MAP_FEATURE]
    cols = [map_]
    for name, col in (extra or {}).items():
        names.append(name)
        cols.append(np.asarray(col, dtype=float))
    return RawTrajectory(
        patient_id=pid,
        time_h=times,
        feature_names=tuple(names),
        features=np.column_stack(cols),
        fluid_ml=np.zeros(n) if fluid is None else np.asarray(fluid, dtype=float),
        vaso_rate=np.zeros(n) if vaso is None else np.asarray(vaso, dtype=float),
        outcome=Outcome(outcome),
    )


@pytest.fixture
def small_world():
    return default_world(n_states_true=6, n_patients=200, seed=3)


def random_tensor(rng, k=5, n_actions=3, density=0.5, min_exit=0.05):
    """Random sparse (k, A, k+2) tensor; every row keeps some terminal mass."""
    T = rng.random((k, n_actions, k + 2)) * (rng.random((k, n_actions, k + 2)) < density)
    T[:, :, k:] += min_exit * rng.random((k, n_actions, 2)) + 1e-3
    return T / T.sum(axis=2, keepdims=True)


def exhaustive_values(T, gamma, reward):
    """Exact values of every deterministic policy, shape (A**k, k)."""
    import itertools

    k, n_actions, _ = T.shape
    policies = np.array(list(itertools.product(range(n_actions), repeat=k)))
    P = T[np.arange(k), policies]  # (n_pol, k, k+2)
    R = P @ reward
    M = np.eye(k) - gamma * P[:, :, :k]
    return policies, np.linalg.solve(M, R[..., None])[..., 0]


ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for name, ok, detail in ACCEPTANCE:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
