"""Tabular MDP estimation from a discretized cohort.

Transition data are stored as sparse matrices with one row per
``(state, action)`` pair (row index ``s * n_actions + a``) and one column per
successor state.  Rewards are attached to *entering* a state: +100 for the
survival terminal, -100 for the death terminal, 0 (or a shaping term)
elsewhere.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .discretize import DiscretizedCohort, StateModel
from .errors import DataError
from .ingest import MAP_FEATURE
from .policy import Policy, StochasticPolicy

log = logging.getLogger(__name__)

SURVIVAL_REWARD = 100.0
DEATH_REWARD = -100.0
HYPOTENSION_MMHG = 65.0
ROW_TOL = 1e-9


@dataclass(frozen=True)
class ShapingConfig:
    enabled: bool = False
    map_threshold: float = HYPOTENSION_MMHG
    bonus: float = 1.0

    def __post_init__(self):
        if self.bonus < 0:
            raise ValueError("shaping bonus must be >= 0")
        if not self.map_threshold > 0:
            raise ValueError("shaping threshold must be > 0")


def terminal_rewards(k: int) -> np.ndarray:
    reward = np.zeros(k + 2)
    reward[k] = SURVIVAL_REWARD
    reward[k + 1] = DEATH_REWARD
    return reward


@dataclass(frozen=True, eq=False)
class MdpModel:
    """Estimated (or hand-built) tabular MDP with ``k`` clusters + 2 terminals.

    ``support[s, a]`` marks the pairs available to planning; terminal rows
    are never supported and self-loop with probability 1.
    """

    k: int
    n_actions: int
    transitions: sp.csr_matrix
    reward: np.ndarray
    gamma: float
    support: np.ndarray
    counts: sp.csr_matrix | None = None
    min_count: int = 5
    smoothing: float = 0.0
    shaping: ShapingConfig = field(default_factory=ShapingConfig)

    def __post_init__(self):
        n, A = self.k + 2, self.n_actions
        T = sp.csr_matrix(self.transitions, dtype=float)
        if T.shape != (n * A, n):
            raise DataError(f"transition matrix shape {T.shape} != {(n * A, n)}")
        if not 0 < self.gamma <= 1:
            raise DataError("gamma must lie in (0, 1]")
        support = np.asarray(self.support, dtype=bool)
        if support.shape != (n, A) or support[self.k:].any():
            raise DataError("support must be (k+2, n_actions) with terminals unsupported")
        row_sums = np.asarray(T.sum(axis=1)).ravel().reshape(n, A)
        bad = np.argwhere(support & (np.abs(row_sums - 1.0) > ROW_TOL))
        if bad.size:
            s, a = bad[0]
            raise DataError(f"transition row ({s}, {a}) does not sum to 1")
        for t in (self.k, self.k + 1):
            rows = T[t * A:(t + 1) * A]
            if not np.allclose(rows[:, t].toarray(), 1.0) or rows.nnz != A:
                raise DataError(f"terminal state {t} must be absorbing")
        reward = np.asarray(self.reward, dtype=float)
        if reward.shape != (n,):
            raise DataError("reward must have one entry per state")
        object.__setattr__(self, "transitions", T)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "reward", reward)

    @property
    def n_states(self) -> int:
        return self.k + 2

    @property
    def survival_state(self) -> int:
        return self.k

    @property
    def death_state(self) -> int:
        return self.k + 1

    @property
    def active(self) -> np.ndarray:
        """Nonterminal states with at least one supported action."""
        return self.support[: self.k].any(axis=1)

    def row(self, s: int, a: int) -> dict[int, float]:
        r = self.transitions[s * self.n_actions + a]
        return {int(j): float(p) for j, p in zip(r.indices, r.data) if p != 0}

    def to_dense(self) -> np.ndarray:
        return self.transitions.toarray().reshape(self.n_states, self.n_actions, self.n_states)

    @classmethod
    def from_tensor(
        cls,
        tensor: np.ndarray,
        gamma: float = 0.99,
        reward: np.ndarray | None = None,
        support: np.ndarray | None = None,
    ) -> "MdpModel":
        """Build a model from a dense ``(k, A, k+2)`` nonterminal tensor.

        Rows that are all zero are unsupported; terminal self-loops are added.
        """
        tensor = np.asarray(tensor, dtype=float)
        k, A, n = tensor.shape
        if n != k + 2:
            raise DataError("tensor must have k+2 successor columns")
        full = np.zeros((n, A, n))
        full[:k] = tensor
        full[k, :, k] = 1.0
        full[k + 1, :, k + 1] = 1.0
        if support is None:
            support = np.zeros((n, A), dtype=bool)
            support[:k] = tensor.sum(axis=2) > 0
        return cls(
            k=k,
            n_actions=A,
            transitions=sp.csr_matrix(full.reshape(n * A, n)),
            reward=terminal_rewards(k) if reward is None else reward,
            gamma=gamma,
            support=support,
            min_count=0,
        )

    # ------------------------------------------------------------------ io
    def save(self, path_prefix: str | Path) -> tuple[Path, Path]:
        """Write ``<prefix>.json`` (header) and ``<prefix>.csv`` (triplets)."""
        prefix = Path(path_prefix)
        header = {
            "k": self.k,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "min_count": self.min_count,
            "smoothing": self.smoothing,
            "shaping": {
                "enabled": self.shaping.enabled,
                "map_threshold": self.shaping.map_threshold,
                "bonus": self.shaping.bonus,
            },
            "reward": self.reward.tolist(),
            "support": [[int(s), int(a)] for s, a in np.argwhere(self.support)],
        }
        json_path, csv_path = prefix.with_suffix(".json"), prefix.with_suffix(".csv")
        json_path.write_text(json.dumps(header, indent=1, sort_keys=True))
        T = self.transitions.tocoo()
        C = self.counts.tocsr() if self.counts is not None else None
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["s", "a", "s_next", "count", "prob"])
            order = np.lexsort((T.col, T.row))
            for i in order:
                r, c = int(T.row[i]), int(T.col[i])
                s, a = divmod(r, self.n_actions)
                if s >= self.k:
                    continue
                count = int(C[r, c]) if C is not None else 0
                w.writerow([s, a, c, count, repr(float(T.data[i]))])
        return json_path, csv_path

    @classmethod
    def load(cls, path_prefix: str | Path) -> "MdpModel":
        prefix = Path(path_prefix)
        header = json.loads(prefix.with_suffix(".json").read_text())
        k, A = header["k"], header["n_actions"]
        n = k + 2
        df = pd.read_csv(prefix.with_suffix(".csv"), float_precision="round_trip")
        rows = (df["s"] * A + df["a"]).to_numpy()
        T = sp.coo_matrix((df["prob"].to_numpy(float), (rows, df["s_next"].to_numpy())), shape=(n * A, n))
        C = sp.coo_matrix((df["count"].to_numpy(np.int64), (rows, df["s_next"].to_numpy())), shape=(n * A, n))
        T = T.tolil()
        for t in (k, k + 1):
            for a in range(A):
                T[t * A + a, t] = 1.0
        support = np.zeros((n, A), dtype=bool)
        for s, a in header["support"]:
            support[s, a] = True
        return cls(
            k=k,
            n_actions=A,
            transitions=T.tocsr(),
            reward=np.array(header["reward"], dtype=float),
            gamma=float(header["gamma"]),
            support=support,
            counts=C.tocsr(),
            min_count=int(header["min_count"]),
            smoothing=float(header["smoothing"]),
            shaping=ShapingConfig(**header["shaping"]),
        )


# --------------------------------------------------------------------------- #
# estimation
# --------------------------------------------------------------------------- #

def count_transitions(cohort: DiscretizedCohort) -> sp.csr_matrix:
    """Transition counts ``N[(s, a), s']`` as an int64 sparse matrix.

    Every bin emits exactly one transition; the last bin of a patient enters
    the terminal matching the outcome.
    """
    n, A = cohort.n_states, cohort.n_actions
    rows = cohort.states * A + cohort.actions
    data = np.ones(cohort.n_bins, dtype=np.int64)
    return sp.csr_matrix(
        sp.coo_matrix((data, (rows, cohort.next_states())), shape=(n * A, n))
    )


def normalize_transitions(
    counts: sp.spmatrix,
    min_count: int = 5,
    smoothing: float = 0.0,
    gamma: float = 0.99,
    reward: np.ndarray | None = None,
) -> MdpModel:
    """Turn counts into an :class:`MdpModel`.

    A pair is supported when its row total reaches ``min_count``.  Smoothing
    adds ``smoothing`` to every *observed* successor before normalizing.  A
    visited state where no action reaches ``min_count`` keeps its most
    frequent action (lowest id on ties) so that it remains plannable;
    unvisited states stay unsupported and are skipped by the planner.
    """
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    C = sp.csr_matrix(counts)
    n = C.shape[1]
    k = n - 2
    A = C.shape[0] // n
    if C.shape[0] != n * A or k < 1:
        raise DataError(f"counts matrix has inconsistent shape {C.shape}")
    C.eliminate_zeros()

    smoothed = C.astype(float)
    smoothed.data += smoothing
    totals = np.asarray(smoothed.sum(axis=1)).ravel()
    raw_totals = np.asarray(C.sum(axis=1)).ravel().reshape(n, A)
    inv = np.divide(1.0, totals, out=np.zeros_like(totals), where=totals > 0)
    T = sp.diags(inv) @ smoothed
    T = T.tolil()
    for t in (k, k + 1):
        for a in range(A):
            T.rows[t * A + a] = [t]
            T.data[t * A + a] = [1.0]
    T = T.tocsr()

    support = np.zeros((n, A), dtype=bool)
    support[:k] = raw_totals[:k] >= max(min_count, 1)
    starved = np.flatnonzero(~support[:k].any(axis=1) & (raw_totals[:k].sum(axis=1) > 0))
    for s in starved:
        support[s, int(np.argmax(raw_totals[s]))] = True
    if starved.size:
        log.info("%d visited states below min_count kept their most frequent action", starved.size)
    if not support.any():
        raise DataError("no supported (state, action) pair: model is vacuous")

    return MdpModel(
        k=k,
        n_actions=A,
        transitions=T,
        reward=terminal_rewards(k) if reward is None else reward,
        gamma=gamma,
        support=support,
        counts=C,
        min_count=min_count,
        smoothing=smoothing,
    )


def estimate_behavior_policy(cohort: DiscretizedCohort, delta: float = 0.01) -> StochasticPolicy:
    """Empirical clinician policy with add-``delta`` smoothing.

    ``pi(a|s) = (N(s,a) + delta) / (N(s) + n_actions * delta)``; unvisited
    states are uniform.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    k, A = cohort.k, cohort.n_actions
    N = np.bincount(cohort.states * A + cohort.actions, minlength=k * A).reshape(k, A).astype(float)
    N += delta
    totals = N.sum(axis=1, keepdims=True)
    probs = np.divide(N, totals, out=np.full_like(N, 1.0 / A), where=totals > 0)
    return StochasticPolicy(probs)


def restrict_to_support(policy: Policy, model: MdpModel) -> StochasticPolicy:
    """Drop mass on unsupported actions and renormalize.

    Rows with no supported mass become uniform over the supported actions;
    states without any supported action stay uniform (they are not planned).
    """
    probs = policy.probabilities().copy()
    sup = model.support[: model.k]
    probs[~sup] = 0.0
    mass = probs.sum(axis=1)
    n_sup = sup.sum(axis=1)
    for s in np.flatnonzero(mass <= 0):
        probs[s] = sup[s] / n_sup[s] if n_sup[s] else 1.0 / model.n_actions
    mass = probs.sum(axis=1, keepdims=True)
    return StochasticPolicy(probs / mass)


def state_map_means(state_model: StateModel) -> np.ndarray:
    return state_model.centroid_feature(MAP_FEATURE)


def apply_reward_shaping(
    model: MdpModel, state_map: np.ndarray | StateModel, config: ShapingConfig
) -> MdpModel:
    """Add ``+bonus`` for entering states whose MAP is at or above the
    threshold and ``-bonus`` otherwise; terminal rewards are untouched.

    ``state_map`` is the per-state MAP (mm Hg) or a fitted state model whose
    centroids carry it.
    """
    if not config.enabled or config.bonus == 0:
        return model
    if isinstance(state_map, StateModel):
        state_map = state_map_means(state_map)
    state_map = np.asarray(state_map, dtype=float)
    if state_map.shape != (model.k,):
        raise DataError(f"need one MAP value per nonterminal state ({model.k})")
    reward = model.reward.copy()
    reward[: model.k] += np.where(state_map >= config.map_threshold, config.bonus, -config.bonus)
    return replace(model, reward=reward, shaping=config)


# --------------------------------------------------------------------------- #
# goodness of fit
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class GofReport:
    state: np.ndarray
    action: np.ndarray
    n: np.ndarray
    statistic: np.ndarray
    p_value: np.ndarray
    alpha: float
    n_mc: int

    @property
    def n_rows(self) -> int:
        return int(self.state.shape[0])

    @property
    def rejected(self) -> np.ndarray:
        return self.p_value < self.alpha

    @property
    def rejection_fraction(self) -> float:
        return float(self.rejected.mean()) if self.n_rows else float("nan")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "state_id": self.state,
                "action_id": self.action,
                "n": self.n,
                "chi2": self.statistic,
                "p_value": self.p_value,
                "rejected": self.rejected,
            }
        )

    def summary(self) -> dict:
        return {
            "eligible_rows": self.n_rows,
            "alpha": self.alpha,
            "n_mc": self.n_mc,
            "rejected": int(self.rejected.sum()),
            "rejection_fraction": self.rejection_fraction,
        }


def _chi2(observed: np.ndarray, expected: np.ndarray) -> np.ndarray:
    return (((observed - expected) ** 2) / expected).sum(axis=-1)


def goodness_of_fit(
    model: MdpModel,
    heldout: DiscretizedCohort | sp.spmatrix,
    n_mc: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
    min_heldout: int = 5,
) -> GofReport:
    """Monte Carlo chi-square test of each supported transition row.

    For every supported ``(s, a)`` with at least ``min_heldout`` held-out
    transitions, the Pearson statistic of the held-out counts against the
    fitted multinomial is compared with ``n_mc`` multinomial resamples; the
    p-value is ``(1 + #{sim >= observed}) / (n_mc + 1)``.  Held-out mass on
    a successor the model gives probability 0 makes the statistic infinite.
    """
    H = count_transitions(heldout) if isinstance(heldout, DiscretizedCohort) else sp.csr_matrix(heldout)
    if H.shape != model.transitions.shape:
        raise DataError("held-out counts do not match the model's state/action space")
    rng = np.random.default_rng(seed)
    A = model.n_actions
    totals = np.asarray(H.sum(axis=1)).ravel()
    flat_support = model.support.ravel()
    eligible = np.flatnonzero(flat_support & (totals >= min_heldout))
    if eligible.size == 0:
        log.warning("goodness_of_fit: no eligible rows (supported with >= %d held-out transitions)", min_heldout)

    stats, pvals = np.empty(eligible.size), np.empty(eligible.size)
    T = model.transitions
    for i, r in enumerate(eligible):
        row = T[r]
        cols, p = row.indices, row.data
        keep = p > 0
        cols, p = cols[keep], p[keep] / p[keep].sum()
        h = H[r]
        n = int(totals[r])
        obs = np.zeros(cols.size)
        pos = {c: j for j, c in enumerate(cols)}
        outside = 0
        for c, v in zip(h.indices, h.data):
            if c in pos:
                obs[pos[c]] = v
            elif v:
                outside += v
        expected = n * p
        stat = np.inf if outside else float(_chi2(obs, expected))
        sims = rng.multinomial(n, p, size=n_mc)
        sim_stats = _chi2(sims, expected)
        if np.isinf(stat):
            exceed = 0
        else:
            exceed = int(np.count_nonzero(sim_stats >= stat - 1e-9 * max(1.0, stat)))
        stats[i] = stat
        pvals[i] = (1 + exceed) / (n_mc + 1)

    return GofReport(
        state=eligible // A,
        action=eligible % A,
        n=totals[eligible].astype(np.int64),
        statistic=stats,
        p_value=pvals,
        alpha=alpha,
        n_mc=n_mc,
    )
