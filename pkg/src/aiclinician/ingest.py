"""Trajectory files, fixed-width time binning and the 5x5 dose grid.

A trajectory CSV has the header::

    patient_id,time_h,<feature columns...>,fluid_ml,vaso_rate,outcome

with ``outcome`` in {survived, died} repeated on every row of a patient and
missing feature cells left empty.  ``map_mmhg`` is the only feature column
that must be present.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

MAP_FEATURE = "map_mmhg"
N_LEVELS = 5
N_ACTIONS = N_LEVELS * N_LEVELS
RESERVED_COLUMNS = ("patient_id", "time_h", "fluid_ml", "vaso_rate", "outcome")
AGGREGATIONS = ("mean", "median", "min", "max", "sum", "first", "last")


class Outcome(str, Enum):
    SURVIVED = "survived"
    DIED = "died"

    @property
    def died(self) -> bool:
        return self is Outcome.DIED


def _arrays_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and bool(np.array_equal(a, b, equal_nan=True))


@dataclass(frozen=True, eq=False)
class RawTrajectory:
    """One patient's timestamped records.

    ``features`` is (n_records, n_features) aligned with ``feature_names``;
    NaN marks a missing measurement.
    """

    patient_id: str
    time_h: np.ndarray
    feature_names: tuple[str, ...]
    features: np.ndarray
    fluid_ml: np.ndarray
    vaso_rate: np.ndarray
    outcome: Outcome

    def __post_init__(self):
        t = np.asarray(self.time_h, dtype=float)
        n = t.shape[0] if t.ndim == 1 else -1
        if n < 1:
            raise DataError(f"patient {self.patient_id}: at least one record required")
        feats = np.asarray(self.features, dtype=float).reshape(n, len(self.feature_names))
        fluid = np.asarray(self.fluid_ml, dtype=float)
        vaso = np.asarray(self.vaso_rate, dtype=float)
        if fluid.shape != (n,) or vaso.shape != (n,):
            raise DataError(f"patient {self.patient_id}: dose arrays do not match record count")
        if not np.all(np.isfinite(t)):
            raise DataError(f"patient {self.patient_id}: non-finite record time")
        if n > 1 and not np.all(np.diff(t) > 0):
            raise DataError(f"patient {self.patient_id}: record times not strictly increasing")
        for name, dose in (("fluid_ml", fluid), ("vaso_rate", vaso)):
            if not np.all(np.isfinite(dose)) or np.any(dose < 0):
                raise DataError(f"patient {self.patient_id}: {name} must be finite and >= 0")
        if np.any(np.isinf(feats)):
            raise DataError(f"patient {self.patient_id}: infinite feature value")
        object.__setattr__(self, "time_h", t)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "fluid_ml", fluid)
        object.__setattr__(self, "vaso_rate", vaso)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "outcome", Outcome(self.outcome))

    @property
    def n_records(self) -> int:
        return self.time_h.shape[0]

    def feature(self, name: str) -> np.ndarray:
        return self.features[:, self.feature_names.index(name)]

    def __eq__(self, other):
        if not isinstance(other, RawTrajectory):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.feature_names == other.feature_names
            and self.outcome == other.outcome
            and _arrays_equal(self.time_h, other.time_h)
            and _arrays_equal(self.features, other.features)
            and _arrays_equal(self.fluid_ml, other.fluid_ml)
            and _arrays_equal(self.vaso_rate, other.vaso_rate)
        )


@dataclass(frozen=True, eq=False)
class BinnedTrajectory:
    """A trajectory aggregated onto bins ``[b*w, (b+1)*w)``.

    Bins between the first and last record are always present; empty ones
    carry features forward and have zero doses (``n_records == 0``).
    Features may still hold NaN before :func:`impute_cohort` fills leading
    gaps with cohort medians.
    """

    patient_id: str
    bin_width_h: float
    bin_index: np.ndarray
    feature_names: tuple[str, ...]
    features: np.ndarray
    fluid_ml_total: np.ndarray
    vaso_rate_bin: np.ndarray
    n_records: np.ndarray
    outcome: Outcome

    @property
    def n_bins(self) -> int:
        return self.bin_index.shape[0]

    @property
    def start_h(self) -> np.ndarray:
        return self.bin_index * self.bin_width_h

    def feature(self, name: str) -> np.ndarray:
        return self.features[:, self.feature_names.index(name)]


@dataclass(frozen=True)
class ActionGrid:
    """Dose-level edges; level 0 is reserved for an exactly-zero dose."""

    fluid_edges: tuple[float, float, float]
    vaso_edges: tuple[float, float, float]

    def __post_init__(self):
        for name in ("fluid_edges", "vaso_edges"):
            edges = tuple(float(e) for e in getattr(self, name))
            if len(edges) != N_LEVELS - 2:
                raise DataError(f"{name} needs exactly {N_LEVELS - 2} edges")
            if not all(math.isfinite(e) for e in edges) or edges[0] <= 0:
                raise DataError(f"{name} must be finite and positive: {edges}")
            if not all(b > a for a, b in zip(edges, edges[1:])):
                raise DataError(f"{name} not strictly increasing (degenerate grid): {edges}")
            object.__setattr__(self, name, edges)

    def to_dict(self) -> dict:
        return {"fluid_edges": list(self.fluid_edges), "vaso_edges": list(self.vaso_edges)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ActionGrid":
        return cls(tuple(d["fluid_edges"]), tuple(d["vaso_edges"]))

    def level_midpoints(self, category: str) -> np.ndarray:
        """Representative physical dose per level (0 for level 0).

        Levels 1-3 use the midpoint of their interval; the open-ended top
        level is extended by half the width of the level below it.
        """
        e = self.fluid_edges if category == "fluid" else self.vaso_edges
        return np.array(
            [0.0, e[0] / 2, (e[0] + e[1]) / 2, (e[1] + e[2]) / 2, e[2] + (e[2] - e[1]) / 2]
        )


# --------------------------------------------------------------------------- #
# CSV I/O
# --------------------------------------------------------------------------- #

def _parse_float(text: str, column: str, line: int, allow_missing: bool = False) -> float:
    text = text.strip()
    if text == "":
        if allow_missing:
            return math.nan
        raise DataError(f"line {line}: missing value in column '{column}'")
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {line}: cannot parse '{text}' in column '{column}'") from None
    if not math.isfinite(value) and not (allow_missing and math.isnan(value)):
        raise DataError(f"line {line}: non-finite value in column '{column}'")
    return value


def parse_trajectories(path: str | Path) -> list[RawTrajectory]:
    """Read a trajectory CSV into one :class:`RawTrajectory` per patient.

    Patients are returned in order of first appearance; row order within a
    patient is preserved and must have strictly increasing ``time_h``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"trajectory file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in (*RESERVED_COLUMNS, MAP_FEATURE):
            if col not in header:
                raise DataError(f"missing required column '{col}'")
        if len(set(header)) != len(header):
            raise DataError("duplicate column names in header")
        col = {name: i for i, name in enumerate(header)}
        feature_names = tuple(h for h in header if h not in RESERVED_COLUMNS)

        rows: dict[str, list] = {}
        outcomes: dict[str, Outcome] = {}
        for fields in reader:
            line = reader.line_num
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) != len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(fields)}")
            pid = fields[col["patient_id"]].strip()
            if not pid:
                raise DataError(f"line {line}: empty patient_id")
            t = _parse_float(fields[col["time_h"]], "time_h", line)
            fluid = _parse_float(fields[col["fluid_ml"]], "fluid_ml", line)
            vaso = _parse_float(fields[col["vaso_rate"]], "vaso_rate", line)
            if fluid < 0 or vaso < 0:
                raise DataError(f"line {line}: negative dose")
            feats = [_parse_float(fields[col[f]], f, line, allow_missing=True) for f in feature_names]
            try:
                outcome = Outcome(fields[col["outcome"]].strip().lower())
            except ValueError:
                raise DataError(
                    f"line {line}: outcome must be 'survived' or 'died', "
                    f"got '{fields[col['outcome']]}'"
                ) from None
            if pid in outcomes and outcomes[pid] is not outcome:
                raise DataError(f"patient {pid}: inconsistent outcome (line {line})")
            outcomes[pid] = outcome
            rows.setdefault(pid, []).append((t, feats, fluid, vaso))

    trajectories = []
    for pid, recs in rows.items():
        times = np.array([r[0] for r in recs])
        if len(times) > 1 and not np.all(np.diff(times) > 0):
            raise DataError(f"patient {pid}: record times not strictly increasing")
        trajectories.append(
            RawTrajectory(
                patient_id=pid,
                time_h=times,
                feature_names=feature_names,
                features=np.array([r[1] for r in recs], dtype=float).reshape(len(recs), len(feature_names)),
                fluid_ml=np.array([r[2] for r in recs]),
                vaso_rate=np.array([r[3] for r in recs]),
                outcome=outcomes[pid],
            )
        )
    return trajectories


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_trajectories(trajectories: Sequence[RawTrajectory], path: str | Path) -> None:
    """Write trajectories in the CSV schema read by :func:`parse_trajectories`."""
    names = trajectories[0].feature_names if trajectories else (MAP_FEATURE,)
    for traj in trajectories:
        if traj.feature_names != names:
            raise DataError("all trajectories must share the same feature columns")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "time_h", *names, "fluid_ml", "vaso_rate", "outcome"])
        for traj in trajectories:
            for i in range(traj.n_records):
                writer.writerow(
                    [
                        traj.patient_id,
                        _fmt(traj.time_h[i]),
                        *(_fmt(v) for v in traj.features[i]),
                        _fmt(traj.fluid_ml[i]),
                        _fmt(traj.vaso_rate[i]),
                        traj.outcome.value,
                    ]
                )


def write_binned(cohort: Sequence[BinnedTrajectory], path: str | Path) -> None:
    names = cohort[0].feature_names if cohort else ()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["patient_id", "bin_index", "start_h", *names,
             "fluid_ml_total", "vaso_rate_bin", "n_records", "outcome"]
        )
        for b in cohort:
            for i in range(b.n_bins):
                writer.writerow(
                    [b.patient_id, int(b.bin_index[i]), _fmt(b.start_h[i]),
                     *(_fmt(v) for v in b.features[i]),
                     _fmt(b.fluid_ml_total[i]), _fmt(b.vaso_rate_bin[i]),
                     int(b.n_records[i]), b.outcome.value]
                )


# --------------------------------------------------------------------------- #
# binning
# --------------------------------------------------------------------------- #

def _aggregate(values: np.ndarray, rel: np.ndarray, n_bins: int, how: str) -> np.ndarray:
    """Aggregate one feature column per bin, ignoring NaN; empty -> NaN."""
    ok = ~np.isnan(values)
    v, r = values[ok], rel[ok]
    counts = np.bincount(r, minlength=n_bins)
    out = np.full(n_bins, np.nan)
    has = counts > 0
    if how == "mean":
        out[has] = np.bincount(r, weights=v, minlength=n_bins)[has] / counts[has]
    elif how == "sum":
        out[has] = np.bincount(r, weights=v, minlength=n_bins)[has]
    elif how == "max":
        acc = np.full(n_bins, -np.inf)
        np.maximum.at(acc, r, v)
        out[has] = acc[has]
    elif how == "min":
        acc = np.full(n_bins, np.inf)
        np.minimum.at(acc, r, v)
        out[has] = acc[has]
    elif how in ("first", "last"):
        # records are time-sorted, so the first/last occurrence per bin is positional
        order = np.arange(len(r)) if how == "last" else np.arange(len(r))[::-1]
        out[r[order]] = v[order]
    elif how == "median":
        for b in np.flatnonzero(has):
            out[b] = np.median(v[r == b])
    else:
        raise ValueError(f"unknown aggregation '{how}' (choose from {AGGREGATIONS})")
    return out


def _carry_forward(col: np.ndarray) -> np.ndarray:
    ok = ~np.isnan(col)
    idx = np.where(ok, np.arange(len(col)), -1)
    np.maximum.accumulate(idx, out=idx)
    out = np.where(idx >= 0, col[np.maximum(idx, 0)], np.nan)
    return out


def bin_trajectory(
    raw: RawTrajectory,
    bin_width_h: float = 1.0,
    aggregation: Mapping[str, str] | None = None,
) -> BinnedTrajectory:
    """Aggregate records into bins of ``bin_width_h`` hours.

    Fluid is summed, vasopressor rate takes the maximum, features use the
    per-feature ``aggregation`` (mean unless overridden).  Missing values
    and empty bins are filled by last observation carried forward.
    """
    if not bin_width_h > 0:
        raise ValueError("bin_width_h must be > 0")
    aggregation = dict(aggregation or {})
    idx = np.floor(raw.time_h / bin_width_h).astype(np.int64)
    first = idx[0]
    rel = idx - first
    n_bins = int(rel[-1]) + 1

    fluid = np.bincount(rel, weights=raw.fluid_ml, minlength=n_bins)
    vaso = np.zeros(n_bins)
    np.maximum.at(vaso, rel, raw.vaso_rate)
    n_records = np.bincount(rel, minlength=n_bins)

    feats = np.empty((n_bins, len(raw.feature_names)))
    for j, name in enumerate(raw.feature_names):
        how = aggregation.get(name, "mean")
        feats[:, j] = _carry_forward(_aggregate(raw.features[:, j], rel, n_bins, how))

    return BinnedTrajectory(
        patient_id=raw.patient_id,
        bin_width_h=float(bin_width_h),
        bin_index=np.arange(first, first + n_bins, dtype=np.int64),
        feature_names=raw.feature_names,
        features=feats,
        fluid_ml_total=fluid,
        vaso_rate_bin=vaso,
        n_records=n_records,
        outcome=raw.outcome,
    )


def impute_cohort(cohort: Sequence[BinnedTrajectory]) -> list[BinnedTrajectory]:
    """Fill remaining (leading) gaps with the cohort median of each feature."""
    if not cohort:
        return []
    stacked = np.vstack([b.features for b in cohort])
    medians = np.full(stacked.shape[1], np.nan)
    for j in range(stacked.shape[1]):
        col = stacked[:, j]
        col = col[~np.isnan(col)]
        if col.size == 0:
            raise DataError(f"feature '{cohort[0].feature_names[j]}' is missing for the whole cohort")
        medians[j] = np.median(col)
    out = []
    for b in cohort:
        if np.isnan(b.features).any():
            feats = np.where(np.isnan(b.features), medians, b.features)
            b = BinnedTrajectory(**{**b.__dict__, "features": feats})
        out.append(b)
    return out


def bin_cohort(
    cohort: Iterable[RawTrajectory],
    bin_width_h: float = 1.0,
    aggregation: Mapping[str, str] | None = None,
) -> list[BinnedTrajectory]:
    """Bin every trajectory and impute leading gaps with cohort medians."""
    return impute_cohort([bin_trajectory(r, bin_width_h, aggregation) for r in cohort])


# --------------------------------------------------------------------------- #
# action grid
# --------------------------------------------------------------------------- #

def _quartile_edges(doses: np.ndarray, category: str) -> tuple[float, float, float]:
    positive = doses[doses > 0]
    if np.unique(positive).size < 4:
        raise DataError(
            f"{category}: need at least 4 distinct positive doses to fit the grid, "
            f"got {np.unique(positive).size}"
        )
    q = np.quantile(positive, [0.25, 0.5, 0.75], method="linear")
    return tuple(float(x) for x in q)


def fit_action_grid(cohort: Sequence[BinnedTrajectory]) -> ActionGrid:
    """Quartiles of the nonzero per-bin doses in each category."""
    fluid = np.concatenate([b.fluid_ml_total for b in cohort]) if cohort else np.empty(0)
    vaso = np.concatenate([b.vaso_rate_bin for b in cohort]) if cohort else np.empty(0)
    return ActionGrid(_quartile_edges(fluid, "fluid"), _quartile_edges(vaso, "vaso"))


def dose_levels(doses: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    doses = np.asarray(doses, dtype=float)
    if np.any(~np.isfinite(doses)) or np.any(doses < 0):
        raise DataError("doses must be finite and >= 0")
    # searchsorted(side='left') counts the edges strictly below each dose
    above = np.searchsorted(np.asarray(edges), doses, side="left")
    return np.where(doses == 0, 0, 1 + above).astype(np.int64)


def discretize_actions(fluid_ml, vaso_rate, grid: ActionGrid) -> np.ndarray:
    """Vectorised :func:`discretize_action`."""
    return N_LEVELS * dose_levels(fluid_ml, grid.fluid_edges) + dose_levels(vaso_rate, grid.vaso_edges)


def discretize_action(fluid_ml: float, vaso_rate: float, grid: ActionGrid) -> int:
    """Map a (fluid, vasopressor) dose pair to an action id in ``[0, 25)``.

    ``action = 5 * fluid_level + vaso_level``.
    """
    if fluid_ml < 0 or vaso_rate < 0:
        raise DataError(f"negative dose: fluid={fluid_ml}, vaso={vaso_rate}")
    return int(discretize_actions(np.array([fluid_ml]), np.array([vaso_rate]), grid)[0])


def split_action(action) -> tuple:
    """``action -> (fluid_level, vaso_level)``; works on arrays too."""
    return np.divmod(action, N_LEVELS) if isinstance(action, np.ndarray) else divmod(int(action), N_LEVELS)
