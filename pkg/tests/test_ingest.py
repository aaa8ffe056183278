import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aiclinician.errors import DataError
from aiclinician.ingest import (
    ActionGrid,
    bin_cohort,
    bin_trajectory,
    discretize_action,
    discretize_actions,
    fit_action_grid,
    impute_cohort,
    parse_trajectories,
    split_action,
    write_trajectories,
)
from aiclinician.simgen import default_world, generate_cohort

from conftest import make_raw

HEADER = "patient_id,time_h,map_mmhg,heart_rate,fluid_ml,vaso_rate,outcome\n"


def write(tmp_path, body, header=HEADER):
    p = tmp_path / "traj.csv"
    p.write_text(header + body)
    return p


def test_parse_one_patient_three_rows(tmp_path):
    p = write(tmp_path, "a,0.0,70,80,0,0,survived\na,0.5,66,,10,0.1,survived\na,1.5,60,90,0,0,survived\n")
    (t,) = parse_trajectories(p)
    assert t.patient_id == "a" and t.n_records == 3
    assert t.feature_names == ("map_mmhg", "heart_rate")
    assert np.isnan(t.features[1, 1])
    assert t.fluid_ml.tolist() == [0, 10, 0]


def test_duplicate_timestamp_names_patient(tmp_path):
    p = write(tmp_path, "a,0,70,80,0,0,died\nbob,0,70,80,0,0,died\nbob,0,71,80,0,0,died\n")
    with pytest.raises(DataError, match="bob"):
        parse_trajectories(p)


def test_malformed_row_names_line(tmp_path):
    p = write(tmp_path, "a,0,70,80,0,0,died\na,1,seventy,80,0,0,died\n")
    with pytest.raises(DataError, match="line 3"):
        parse_trajectories(p)


def test_short_row_names_line(tmp_path):
    p = write(tmp_path, "a,0,70,80,0,died\n")
    with pytest.raises(DataError, match="line 2"):
        parse_trajectories(p)


def test_missing_column_named(tmp_path):
    p = write(tmp_path, "a,0,70,0,0,died\n", header="patient_id,time_h,map_mmhg,fluid_ml,outcome,vaso\n")
    with pytest.raises(DataError, match="vaso_rate"):
        parse_trajectories(p)


def test_missing_map_column(tmp_path):
    p = write(tmp_path, "a,0,80,0,0,died\n", header="patient_id,time_h,heart_rate,fluid_ml,vaso_rate,outcome\n")
    with pytest.raises(DataError, match="map_mmhg"):
        parse_trajectories(p)


def test_bad_outcome_and_negative_dose(tmp_path):
    with pytest.raises(DataError, match="outcome"):
        parse_trajectories(write(tmp_path, "a,0,70,80,0,0,alive\n"))
    with pytest.raises(DataError, match="negative"):
        parse_trajectories(write(tmp_path, "a,0,70,80,-1,0,died\n"))


def test_simgen_cohort_round_trips(tmp_path):
    cohort = generate_cohort(default_world(n_states_true=5, n_patients=30, seed=1, fast_dynamics=True))
    p = tmp_path / "c.csv"
    write_trajectories(cohort, p)
    assert parse_trajectories(p) == cohort


def test_round_trip_keeps_missing_cells(tmp_path):
    t = make_raw(times=[0, 1], extra={"lactate": [np.nan, 2.0]})
    p = tmp_path / "c.csv"
    write_trajectories([t], p)
    assert parse_trajectories(p) == [t]


def test_bin_sum_and_max_rules():
    t = make_raw(times=[0.2, 0.7], fluid=[50, 70], vaso=[0.1, 0.5])
    b = bin_trajectory(t, 1.0)
    assert b.n_bins == 1
    assert b.fluid_ml_total[0] == 120
    assert b.vaso_rate_bin[0] == 0.5


def test_bin_mean_and_override():
    t = make_raw(times=[0.1, 0.4, 0.9], map_=[60, 70, 80])
    assert bin_trajectory(t, 1.0).features[0, 0] == pytest.approx(70)
    assert bin_trajectory(t, 1.0, {"map_mmhg": "min"}).features[0, 0] == 60


def test_empty_bins_carry_forward_with_zero_dose():
    t = make_raw(times=[0.5, 3.5], map_=[60, 80], fluid=[10, 20], vaso=[0.2, 0.0])
    b = bin_trajectory(t, 1.0)
    assert b.bin_index.tolist() == [0, 1, 2, 3]
    assert b.features[:, 0].tolist() == [60, 60, 60, 80]
    assert b.fluid_ml_total.tolist() == [10, 0, 0, 20]
    assert b.vaso_rate_bin.tolist() == [0.2, 0, 0, 0]
    assert b.n_records.tolist() == [1, 0, 0, 1]


def test_bins_are_absolute_hours():
    b = bin_trajectory(make_raw(times=[5.5, 9.2]), 4.0)
    assert b.bin_index.tolist() == [1, 2]
    assert b.start_h.tolist() == [4.0, 8.0]


def test_missing_values_locf_then_cohort_median():
    a = make_raw("a", times=[0, 1, 2], extra={"lac": [np.nan, 2.0, np.nan]})
    c = make_raw("c", times=[0], extra={"lac": [4.0]})
    binned = impute_cohort([bin_trajectory(a), bin_trajectory(c)])
    # leading gap -> median of observed per-bin values (2, 2, 4) = 2; trailing gap -> LOCF
    assert binned[0].feature("lac").tolist() == [2.0, 2.0, 2.0]


def test_fluid_conserved_across_widths():
    cohort = generate_cohort(default_world(n_states_true=5, n_patients=40, seed=2))
    for t in cohort:
        direct = t.fluid_ml.sum()
        for w in (0.5, 1.0, 4.0):
            assert bin_trajectory(t, w).fluid_ml_total.sum() == pytest.approx(direct, rel=1e-12, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(
    gaps=st.lists(st.floats(0.01, 3.0), min_size=1, max_size=30),
    fluid=st.lists(st.integers(0, 2000), min_size=30, max_size=30),
    width=st.sampled_from([0.25, 0.5, 1.0, 2.0, 4.0]),
)
def test_fluid_conservation_exact_for_integer_volumes(gaps, fluid, width):
    times = np.cumsum(gaps)
    t = make_raw(times=times, fluid=fluid[: times.size])
    assert bin_trajectory(t, width).fluid_ml_total.sum() == sum(fluid[: times.size])


@settings(max_examples=40, deadline=None)
@given(gaps=st.lists(st.floats(0.01, 2.0), min_size=1, max_size=20), seed=st.integers(0, 1000))
def test_binning_deterministic(gaps, seed):
    rng = np.random.default_rng(seed)
    n = len(gaps)
    t = make_raw(times=np.cumsum(gaps), map_=rng.normal(70, 10, n), fluid=rng.integers(0, 100, n), vaso=rng.random(n))
    a, b = bin_trajectory(t, 1.0), bin_trajectory(t, 1.0)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.vaso_rate_bin, b.vaso_rate_bin)


def _binned_with_doses(fluid, vaso):
    t = make_raw(times=np.arange(len(fluid)) + 0.5, fluid=fluid, vaso=vaso)
    return [bin_trajectory(t)]


def test_grid_quartiles_match_sort_and_interpolate():
    b = _binned_with_doses([0, 10, 20, 30, 40, 0], [0, 1, 2, 3, 4, 0])
    grid = fit_action_grid(b)

    def oracle(xs, q):
        xs = sorted(xs)
        h = (len(xs) - 1) * q
        lo = int(h)
        return xs[lo] + (h - lo) * (xs[min(lo + 1, len(xs) - 1)] - xs[lo])

    assert grid.fluid_edges == tuple(oracle([10, 20, 30, 40], q) for q in (0.25, 0.5, 0.75))
    assert grid.fluid_edges == (17.5, 25.0, 32.5)


def test_degenerate_grid_errors():
    with pytest.raises(DataError):
        fit_action_grid(_binned_with_doses([5, 5, 5, 5], [1, 2, 3, 4]))
    with pytest.raises(DataError):
        ActionGrid((1.0, 1.0, 2.0), (1.0, 2.0, 3.0))


def test_simgen_grid_levels_are_quartiles():
    cohort = bin_cohort(generate_cohort(default_world(n_patients=3000, seed=4)))
    grid = fit_action_grid(cohort)
    fluid = np.concatenate([b.fluid_ml_total for b in cohort])
    levels = discretize_actions(fluid, np.zeros_like(fluid), grid) // 5
    share = np.bincount(levels[levels > 0], minlength=5)[1:] / np.count_nonzero(levels)
    assert np.all(np.abs(share - 0.25) < 0.05)


GRID = ActionGrid((100.0, 250.0, 500.0), (0.1, 0.2, 0.4))


def test_discretize_action_examples():
    assert discretize_action(0, 0, GRID) == 0
    assert discretize_action(1e6, 0, GRID) == 20
    assert discretize_action(100.0, 0.1, GRID) == 5 * 1 + 1  # at an edge: no edge strictly below
    assert discretize_action(100.0001, 0.4001, GRID) == 5 * 2 + 4
    with pytest.raises(DataError):
        discretize_action(-1, 0, GRID)


def _bucket(x, edges):
    if x == 0:
        return 0
    return 1 + sum(1 for e in edges if e < x)


@settings(max_examples=200, deadline=None)
@given(
    f=st.one_of(st.just(0.0), st.floats(0, 2000), st.sampled_from([100.0, 250.0, 500.0])),
    v=st.one_of(st.just(0.0), st.floats(0, 2), st.sampled_from([0.1, 0.2, 0.4])),
)
def test_discretize_matches_scalar_bucketing(f, v):
    a = discretize_action(f, v, GRID)
    assert split_action(a) == (_bucket(f, GRID.fluid_edges), _bucket(v, GRID.vaso_edges))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 2000), st.floats(0, 2000), st.floats(0, 2))
def test_discretize_monotone(f1, f2, v):
    lo, hi = sorted((f1, f2))
    assert discretize_action(lo, v, GRID) <= discretize_action(hi, v, GRID)
    assert discretize_action(v, lo / 1000, GRID) <= discretize_action(v, hi / 1000, GRID)


def test_discretize_surjective():
    f = [0, 50, 200, 300, 900]
    v = [0, 0.05, 0.15, 0.3, 1]
    ids = {discretize_action(a, b, GRID) for a in f for b in v}
    assert ids == set(range(25))


def test_grid_json_round_trip():
    assert ActionGrid.from_dict(GRID.to_dict()) == GRID


def test_level_midpoints():
    assert GRID.level_midpoints("fluid").tolist() == [0, 50, 175, 375, 625]
