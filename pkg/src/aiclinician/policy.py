"""Deterministic and stochastic policies over the nonterminal states."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import N_ACTIONS

ROW_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class DeterministicPolicy:
    """One action per nonterminal state."""

    actions: np.ndarray
    n_actions: int = N_ACTIONS

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=np.int64).ravel()
        if a.size and (a.min() < 0 or a.max() >= self.n_actions):
            raise DataError(f"policy actions must lie in [0, {self.n_actions})")
        object.__setattr__(self, "actions", a)

    @property
    def k(self) -> int:
        return self.actions.shape[0]

    def probabilities(self) -> np.ndarray:
        probs = np.zeros((self.k, self.n_actions))
        probs[np.arange(self.k), self.actions] = 1.0
        return probs

    def __eq__(self, other):
        if not isinstance(other, DeterministicPolicy):
            return NotImplemented
        return self.n_actions == other.n_actions and np.array_equal(self.actions, other.actions)

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["state_id", "action_id"])
            for s, a in enumerate(self.actions):
                w.writerow([s, int(a)])

    @classmethod
    def load_csv(cls, path: str | Path, n_actions: int = N_ACTIONS) -> "DeterministicPolicy":
        with Path(path).open(newline="") as fh:
            rows = sorted((int(r["state_id"]), int(r["action_id"])) for r in csv.DictReader(fh))
        if [s for s, _ in rows] != list(range(len(rows))):
            raise DataError(f"{path}: state ids must be 0..k-1")
        return cls(np.array([a for _, a in rows]), n_actions)


@dataclass(frozen=True, eq=False)
class StochasticPolicy:
    """Per-state distribution over actions, shape (k, n_actions)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2:
            raise DataError("stochastic policy must be a (k, n_actions) matrix")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise DataError("policy probabilities must be finite and nonnegative")
        bad = np.flatnonzero(np.abs(p.sum(axis=1) - 1.0) > ROW_TOL)
        if bad.size:
            raise DataError(f"policy row for state {bad[0]} does not sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def k(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def probabilities(self) -> np.ndarray:
        return self.probs

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["state_id", *(f"a{j}" for j in range(self.n_actions))])
            for s, row in enumerate(self.probs):
                w.writerow([s, *(repr(float(x)) for x in row)])

    @classmethod
    def load_csv(cls, path: str | Path) -> "StochasticPolicy":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            rows = sorted((int(r[0]), [float(x) for x in r[1:]]) for r in reader)
        return cls(np.array([r for _, r in rows]))


Policy = DeterministicPolicy | StochasticPolicy

