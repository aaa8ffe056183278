"""k-means state model and the discrete (state, action) cohort.

States ``0..k-1`` are clusters; ``k`` is the absorbing survival state and
``k + 1`` the absorbing death state.  Terminal ids are never produced by
:func:`assign_state`.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .ingest import N_ACTIONS, ActionGrid, BinnedTrajectory, discretize_actions

MAX_ITER = 300
REL_TOL = 1e-6
_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class StateModel:
    k: int
    centroids: np.ndarray
    scaler_mean: np.ndarray
    scaler_std: np.ndarray
    feature_order: tuple[str, ...]
    seed: int
    inertia: float = float("nan")
    n_iter: int = 0
    inertia_history: tuple[float, ...] = ()

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=float)
        if c.shape != (self.k, len(self.feature_order)):
            raise DataError(f"expected {self.k} centroids of dim {len(self.feature_order)}, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise DataError("centroids must be finite")
        std = np.asarray(self.scaler_std, dtype=float)
        if np.any(~(std > 0)):
            raise DataError("scaler standard deviations must be > 0")
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "scaler_mean", np.asarray(self.scaler_mean, dtype=float))
        object.__setattr__(self, "scaler_std", std)
        object.__setattr__(self, "feature_order", tuple(self.feature_order))

    @property
    def survival_state(self) -> int:
        return self.k

    @property
    def death_state(self) -> int:
        return self.k + 1

    def normalize(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.scaler_mean) / self.scaler_std

    def centroid_feature(self, name: str) -> np.ndarray:
        """Centroid coordinates for ``name`` in original units."""
        if name not in self.feature_order:
            raise DataError(f"feature '{name}' is not part of the state model")
        j = self.feature_order.index(name)
        return self.centroids[:, j] * self.scaler_std[j] + self.scaler_mean[j]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "feature_order": list(self.feature_order),
            "scaler": {"mean": self.scaler_mean.tolist(), "std": self.scaler_std.tolist()},
            "centroids": self.centroids.tolist(),
            "inertia": self.inertia,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StateModel":
        return cls(
            k=int(d["k"]),
            centroids=np.array(d["centroids"], dtype=float),
            scaler_mean=np.array(d["scaler"]["mean"], dtype=float),
            scaler_std=np.array(d["scaler"]["std"], dtype=float),
            feature_order=tuple(d["feature_order"]),
            seed=int(d["seed"]),
            inertia=float(d.get("inertia", float("nan"))),
            n_iter=int(d.get("n_iter", 0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "StateModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- #
# nearest centroid and k-means
# --------------------------------------------------------------------------- #

def nearest_centroid(Z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid for each row of ``Z`` (lowest id on ties).

    Distances come from the BLAS expansion; rows whose best two candidates are
    within rounding of each other are re-scored with exact differences so the
    tie-break is reliable.
    """
    Z = np.atleast_2d(Z)
    c_sq = np.einsum("ij,ij->i", centroids, centroids)
    labels = np.empty(Z.shape[0], dtype=np.int64)
    for lo in range(0, Z.shape[0], _CHUNK):
        z = Z[lo:lo + _CHUNK]
        z_sq = np.einsum("ij,ij->i", z, z)
        d2 = z_sq[:, None] - 2.0 * z @ centroids.T + c_sq[None, :]
        best = d2.min(axis=1)
        slack = 1e-9 * (z_sq + c_sq.max() + 1.0)
        near = d2 <= (best + slack)[:, None]
        lab = near.argmax(axis=1)
        ambiguous = np.flatnonzero(near.sum(axis=1) > 1)
        for i in ambiguous:
            cand = np.flatnonzero(near[i])
            exact = ((centroids[cand] - z[i]) ** 2).sum(axis=1)
            lab[i] = cand[np.argmin(exact)]
        labels[lo:lo + _CHUNK] = lab
    return labels


def _inertia(Z: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((Z - centroids[labels]) ** 2).sum())


def _kmeans_pp(Z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = Z.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((Z - Z[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise DataError("fewer distinct feature vectors than states")
        nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((Z - Z[nxt]) ** 2).sum(axis=1))
    return Z[chosen].copy()


def kmeans(Z: np.ndarray, k: int, seed: int, max_iter: int = MAX_ITER, tol: float = REL_TOL):
    """k-means++ seeding followed by Lloyd iterations.

    Stops when the relative inertia change drops below ``tol`` or after
    ``max_iter`` iterations.  An emptied cluster is re-seeded at the point
    farthest from its centroid.  Returns ``(centroids, labels, history)``.
    """
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(Z, k, rng)
    labels = nearest_centroid(Z, centroids)
    history = [_inertia(Z, centroids, labels)]
    if history[0] == 0:
        return centroids, labels, history
    for _ in range(max_iter):
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, Z)
        counts = np.bincount(labels, minlength=k)
        nonempty = counts > 0
        centroids = centroids.copy()
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = int(np.argmax(((Z - centroids[labels]) ** 2).sum(axis=1)))
            centroids[j] = Z[far]
            labels[far] = j
        labels = nearest_centroid(Z, centroids)
        history.append(_inertia(Z, centroids, labels))
        prev, cur = history[-2], history[-1]
        if cur == 0 or abs(prev - cur) / prev < tol:
            break
    return centroids, labels, history


def fit_state_model_matrix(
    X: np.ndarray, feature_names: Sequence[str], k: int = 750, seed: int = 0
) -> StateModel:
    """Fit the state model on a raw (unnormalized) feature matrix."""
    X = np.asarray(X, dtype=float)
    names = tuple(feature_names)
    if X.ndim != 2 or X.shape[1] != len(names):
        raise DataError("feature matrix does not match feature names")
    if np.isnan(X).any():
        raise DataError("feature matrix contains missing values; impute before clustering")
    if k < 1:
        raise DataError("k must be >= 1")
    std = X.std(axis=0)
    keep = std > 0
    if not keep.any():
        raise DataError("all features are constant; cannot normalize")
    if not keep.all():
        dropped = [n for n, kept in zip(names, keep) if not kept]
        warnings.warn(f"dropping constant features: {dropped}", stacklevel=2)
    X, names, std = X[:, keep], tuple(n for n, kept in zip(names, keep) if kept), std[keep]
    mean = X.mean(axis=0)
    Z = (X - mean) / std
    n_distinct = np.unique(Z, axis=0).shape[0]
    if n_distinct < k:
        raise DataError(f"only {n_distinct} distinct bins for k={k} states")
    centroids, _, history = kmeans(Z, k, seed)
    return StateModel(
        k=k,
        centroids=centroids,
        scaler_mean=mean,
        scaler_std=std,
        feature_order=names,
        seed=seed,
        inertia=history[-1],
        n_iter=len(history) - 1,
        inertia_history=tuple(history),
    )


def fit_state_model(cohort: Sequence[BinnedTrajectory], k: int = 750, seed: int = 0) -> StateModel:
    """Cluster every bin of an imputed cohort into ``k`` states."""
    if not cohort:
        raise DataError("empty cohort")
    X = np.vstack([b.features for b in cohort])
    return fit_state_model_matrix(X, cohort[0].feature_names, k, seed)


def _feature_matrix(cohort_names: Sequence[str], X: np.ndarray, model: StateModel) -> np.ndarray:
    try:
        cols = [list(cohort_names).index(f) for f in model.feature_order]
    except ValueError:
        missing = [f for f in model.feature_order if f not in cohort_names]
        raise DataError(f"missing required features: {missing}") from None
    sub = X[:, cols]
    if np.isnan(sub).any():
        raise DataError("missing feature values; impute before state assignment")
    return sub


def assign_states(X: np.ndarray, feature_names: Sequence[str], model: StateModel) -> np.ndarray:
    return nearest_centroid(model.normalize(_feature_matrix(feature_names, X, model)), model.centroids)


def assign_state(features: Mapping[str, float], model: StateModel) -> int:
    """Nearest-centroid state id for one named feature vector."""
    missing = [f for f in model.feature_order if f not in features]
    if missing:
        raise DataError(f"missing required features: {missing}")
    x = np.array([[float(features[f]) for f in model.feature_order]])
    return int(assign_states(x, model.feature_order, model)[0])


# --------------------------------------------------------------------------- #
# discretized cohort
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class DiscretizedCohort:
    """Flat storage of per-patient (state, action) sequences.

    Patient ``i`` owns ``states[offsets[i]:offsets[i+1]]``.  ``died[i]``
    selects the terminal: ``k + 1`` if True, else ``k``.
    """

    k: int
    patient_ids: tuple[str, ...]
    offsets: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    died: np.ndarray
    n_actions: int = N_ACTIONS

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.int64)
        states = np.asarray(self.states, dtype=np.int64)
        actions = np.asarray(self.actions, dtype=np.int64)
        died = np.asarray(self.died, dtype=bool)
        n = len(self.patient_ids)
        if offsets.shape != (n + 1,) or offsets[0] != 0 or offsets[-1] != states.shape[0]:
            raise DataError("offsets inconsistent with sequences")
        if n and np.any(np.diff(offsets) < 1):
            raise DataError("every patient needs at least one bin")
        if states.shape != actions.shape or died.shape != (n,):
            raise DataError("state/action/terminal arrays have inconsistent shapes")
        if states.size and (states.min() < 0 or states.max() >= self.k):
            raise DataError(f"state ids must lie in [0, {self.k})")
        if actions.size and (actions.min() < 0 or actions.max() >= self.n_actions):
            raise DataError(f"action ids must lie in [0, {self.n_actions})")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "died", died)
        object.__setattr__(self, "patient_ids", tuple(self.patient_ids))

    @classmethod
    def from_sequences(cls, k: int, sequences, n_actions: int = N_ACTIONS) -> "DiscretizedCohort":
        """Build from ``(patient_id, states, actions, died)`` tuples."""
        sequences = list(sequences)
        lengths = [len(s[1]) for s in sequences]
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        cat = (lambda i: np.concatenate([np.asarray(s[i], dtype=np.int64) for s in sequences])
               if sequences else np.empty(0, dtype=np.int64))
        return cls(
            k=k,
            patient_ids=tuple(str(s[0]) for s in sequences),
            offsets=offsets,
            states=cat(1),
            actions=cat(2),
            died=np.array([bool(s[3]) for s in sequences], dtype=bool),
            n_actions=n_actions,
        )

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def n_bins(self) -> int:
        return int(self.states.shape[0])

    @property
    def n_states(self) -> int:
        return self.k + 2

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def patient_index(self) -> np.ndarray:
        """Owning patient of every bin."""
        return np.repeat(np.arange(self.n_patients), self.lengths)

    @property
    def first_states(self) -> np.ndarray:
        return self.states[self.offsets[:-1]]

    @property
    def terminal_states(self) -> np.ndarray:
        return np.where(self.died, self.k + 1, self.k)

    def next_states(self) -> np.ndarray:
        """State entered after each bin; the last bin enters the terminal."""
        nxt = np.empty_like(self.states)
        nxt[:-1] = self.states[1:]
        if self.n_patients:
            nxt[self.offsets[1:] - 1] = self.terminal_states
        return nxt

    def trajectory(self, i: int) -> tuple[np.ndarray, np.ndarray, bool]:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return self.states[lo:hi], self.actions[lo:hi], bool(self.died[i])

    def subset(self, indices) -> "DiscretizedCohort":
        """Patients by index; repeats are allowed (bootstrap resamples)."""
        indices = np.asarray(indices, dtype=np.int64)
        lengths = self.lengths[indices]
        starts = self.offsets[:-1][indices]
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        gather = np.repeat(starts - offsets[:-1], lengths) + np.arange(offsets[-1])
        return DiscretizedCohort(
            k=self.k,
            patient_ids=tuple(self.patient_ids[i] for i in indices),
            offsets=offsets,
            states=self.states[gather],
            actions=self.actions[gather],
            died=self.died[indices],
            n_actions=self.n_actions,
        )

    def mortality(self) -> float:
        return float(self.died.mean())

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "step", "state_id", "action_id", "outcome"])
            for i, pid in enumerate(self.patient_ids):
                s, a, died = self.trajectory(i)
                outcome = "died" if died else "survived"
                for t in range(len(s)):
                    w.writerow([pid, t, int(s[t]), int(a[t]), outcome])

    @classmethod
    def read_csv(cls, path: str | Path, k: int, n_actions: int = N_ACTIONS) -> "DiscretizedCohort":
        seqs: dict[str, list] = {}
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                entry = seqs.setdefault(row["patient_id"], [[], [], row["outcome"] == "died"])
                entry[0].append(int(row["state_id"]))
                entry[1].append(int(row["action_id"]))
        return cls.from_sequences(k, [(pid, s, a, d) for pid, (s, a, d) in seqs.items()], n_actions)


def discretize_cohort(
    cohort: Sequence[BinnedTrajectory], model: StateModel, grid: ActionGrid
) -> DiscretizedCohort:
    """Map every bin to ``(assign_state, discretize_action)``."""
    if not cohort:
        return DiscretizedCohort.from_sequences(model.k, [])
    X = np.vstack([b.features for b in cohort])
    states = assign_states(X, cohort[0].feature_names, model)
    actions = discretize_actions(
        np.concatenate([b.fluid_ml_total for b in cohort]),
        np.concatenate([b.vaso_rate_bin for b in cohort]),
        grid,
    )
    offsets = np.concatenate([[0], np.cumsum([b.n_bins for b in cohort])]).astype(np.int64)
    return DiscretizedCohort(
        k=model.k,
        patient_ids=tuple(b.patient_id for b in cohort),
        offsets=offsets,
        states=states,
        actions=actions,
        died=np.array([b.outcome.died for b in cohort], dtype=bool),
    )
