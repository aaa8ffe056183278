"""Critique artifacts: action histogram, patient timeline, dose-excess
mortality curve, vasopressor exposure and the bin-width aliasing report.

Every function returns a plain number or a pandas DataFrame that can be
written straight to CSV.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import pandas as pd

from .discretize import DiscretizedCohort, StateModel, assign_states
from .errors import DataError
from .estimate import HYPOTENSION_MMHG, MdpModel
from .ingest import (
    MAP_FEATURE,
    N_LEVELS,
    ActionGrid,
    BinnedTrajectory,
    RawTrajectory,
    bin_trajectory,
    discretize_actions,
)
from .policy import DeterministicPolicy

log = logging.getLogger(__name__)

CATEGORIES = ("fluid", "vaso")


def action_histogram(cohort: DiscretizedCohort) -> pd.DataFrame:
    """5x5 counts; rows are fluid levels, columns vasopressor levels."""
    counts = np.bincount(cohort.actions, minlength=N_LEVELS * N_LEVELS).reshape(N_LEVELS, N_LEVELS)
    return pd.DataFrame(
        counts,
        index=pd.Index(range(N_LEVELS), name="fluid_level"),
        columns=pd.Index(range(N_LEVELS), name="vaso_level"),
    )


def patient_timeline(
    binned: BinnedTrajectory,
    ai_policy: DeterministicPolicy,
    state_model: StateModel,
    grid: ActionGrid,
    model: MdpModel | None = None,
    clinician_actions: np.ndarray | None = None,
    raw: RawTrajectory | None = None,
) -> pd.DataFrame:
    """One row per bin: MAP, clinician and AI dose levels, and a flag where
    MAP is below 65 mm Hg while the AI recommends no drug at all.

    States the model never planned are marked ``supported = False`` and carry
    no AI recommendation.  ``raw`` only adds the record count per bin as a
    cross-check.
    """
    states = assign_states(binned.features, binned.feature_names, state_model)
    if clinician_actions is None:
        clinician_actions = discretize_actions(binned.fluid_ml_total, binned.vaso_rate_bin, grid)
    clinician_actions = np.asarray(clinician_actions, dtype=np.int64)
    if clinician_actions.shape != (binned.n_bins,):
        raise DataError("need one clinician action per bin")
    supported = model.active[states] if model is not None else np.ones(binned.n_bins, dtype=bool)
    ai = ai_policy.actions[states]
    map_ = binned.feature(MAP_FEATURE)

    frame = pd.DataFrame({
        "bin_index": binned.bin_index,
        "time_h": binned.start_h,
        "map_mmhg": map_,
        "state": states,
        "clinician_fluid_level": clinician_actions // N_LEVELS,
        "clinician_vaso_level": clinician_actions % N_LEVELS,
        "ai_fluid_level": pd.array(np.where(supported, ai // N_LEVELS, 0), dtype="Int64"),
        "ai_vaso_level": pd.array(np.where(supported, ai % N_LEVELS, 0), dtype="Int64"),
        "supported": supported,
        "hypotensive_no_drug": (map_ < HYPOTENSION_MMHG) & (ai == 0) & supported,
    })
    frame.loc[~supported, ["ai_fluid_level", "ai_vaso_level"]] = pd.NA
    if raw is not None:
        if raw.patient_id != binned.patient_id:
            raise DataError("raw and binned trajectories belong to different patients")
        rel = np.floor(raw.time_h / binned.bin_width_h).astype(np.int64) - binned.bin_index[0]
        frame["n_records"] = np.bincount(rel, minlength=binned.n_bins)
    return frame


def dose_excess_curve(
    cohort: DiscretizedCohort,
    ai_policy: DeterministicPolicy,
    grid: ActionGrid | None = None,
    category: str = "fluid",
    n_bins: int = 10,
    n_boot: int = 1000,
    units: str = "levels",
    model: MdpModel | None = None,
    seed: int = 0,
) -> pd.DataFrame:
    """Observed mortality against how far the clinician's dose exceeded the
    AI recommendation.

    Per bin, excess = given level - recommended level (or the difference of
    level midpoints when ``units == "physical"``).  Patients are grouped by
    their mean excess into ``n_bins`` equal-width groups; each non-empty
    group reports mortality with a percentile bootstrap 95% CI.  Bins in
    states the model never planned are ignored.
    """
    if category not in CATEGORIES:
        raise ValueError(f"category must be one of {CATEGORIES}")
    if units not in ("levels", "physical"):
        raise ValueError("units must be 'levels' or 'physical'")
    if n_bins < 1 or n_boot < 1:
        raise ValueError("n_bins and n_boot must be >= 1")

    def level(actions):
        return actions // N_LEVELS if category == "fluid" else actions % N_LEVELS

    given = level(cohort.actions)
    recommended = level(ai_policy.actions[cohort.states])
    if units == "physical":
        if grid is None:
            raise DataError("physical units need the fitted action grid")
        mid = grid.level_midpoints(category)
        excess = mid[given] - mid[recommended]
    else:
        excess = (given - recommended).astype(float)

    keep = model.active[cohort.states] if model is not None else np.ones(cohort.n_bins, dtype=bool)
    pidx = cohort.patient_index[keep]
    sums = np.bincount(pidx, weights=excess[keep], minlength=cohort.n_patients)
    counts = np.bincount(pidx, minlength=cohort.n_patients)
    has = counts > 0
    mean_excess = sums[has] / counts[has]
    died = cohort.died[has].astype(float)
    if mean_excess.size == 0:
        raise DataError("no patient has a bin in a planned state")

    lo, hi = mean_excess.min(), mean_excess.max()
    if hi > lo:
        edges = np.linspace(lo, hi, n_bins + 1)
        group = np.clip(np.searchsorted(edges, mean_excess, side="right") - 1, 0, n_bins - 1)
    else:
        edges = np.array([lo, hi])
        group = np.zeros(mean_excess.size, dtype=np.int64)

    rng = np.random.default_rng(seed)
    rows = []
    for g in range(len(edges) - 1):
        members = np.flatnonzero(group == g)
        if members.size == 0:
            log.info("dose-excess group %d [%g, %g] is empty and omitted", g, edges[g], edges[g + 1])
            continue
        d = died[members]
        boot = d[rng.integers(d.size, size=(n_boot, d.size))].mean(axis=1)
        rows.append({
            "group": g,
            "excess_low": edges[g],
            "excess_high": edges[g + 1],
            "n_patients": int(members.size),
            "mean_excess": float(mean_excess[members].mean()),
            "mortality": float(d.mean()),
            "ci_low": float(np.quantile(boot, 0.025)),
            "ci_high": float(np.quantile(boot, 0.975)),
        })
    return pd.DataFrame(rows)


def vasopressor_exposure(cohort: Sequence[RawTrajectory]) -> float:
    """Share of patients with any record carrying a positive vasopressor rate."""
    if not cohort:
        return 0.0
    return float(np.mean([bool(np.any(t.vaso_rate > 0)) for t in cohort]))


def binning_aliasing_report(
    cohort: Sequence[RawTrajectory],
    widths: Sequence[float] = (1.0, 4.0),
    threshold: float = HYPOTENSION_MMHG,
) -> pd.DataFrame:
    """Share of normotensive-but-dosed units at each bin width.

    A bin counts when its aggregated MAP is at or above ``threshold`` while
    its vasopressor level is nonzero.  Only bins holding records are counted.
    The first row is the same share over raw records.
    """
    n_rec = hit_rec = 0
    for t in cohort:
        m = t.feature(MAP_FEATURE)
        n_rec += t.n_records
        hit_rec += int(np.sum((m >= threshold) & (t.vaso_rate > 0)))
    rows = [{"resolution": "raw", "width_h": 0.0, "n_units": n_rec, "n_normotensive_dosed": hit_rec}]
    for w in widths:
        n = hit = 0
        for t in cohort:
            b = bin_trajectory(t, w)
            occupied = b.n_records > 0
            m = b.feature(MAP_FEATURE)
            n += int(occupied.sum())
            hit += int(np.sum(occupied & (m >= threshold) & (b.vaso_rate_bin > 0)))
        rows.append({"resolution": "binned", "width_h": float(w), "n_units": n, "n_normotensive_dosed": hit})
    frame = pd.DataFrame(rows)
    frame["rate"] = frame["n_normotensive_dosed"] / frame["n_units"].where(frame["n_units"] > 0)
    return frame
