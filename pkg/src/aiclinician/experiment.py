"""Bootstrap realizations of the four-policy comparison.

Each realization resamples patients, rebuilds the environment (action grid,
state model, MDP), learns a policy by policy iteration and scores the AI,
clinician, zero-drug and random policies both on the realization's own model
and by weighted importance sampling on held-out patients.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .discretize import StateModel, discretize_cohort, fit_state_model
from .errors import ConfigError, DataError, NumericalError
from .estimate import (
    MdpModel,
    ShapingConfig,
    apply_reward_shaping,
    count_transitions,
    estimate_behavior_policy,
    normalize_transitions,
    restrict_to_support,
)
from .ingest import ActionGrid, BinnedTrajectory, RawTrajectory, bin_cohort, fit_action_grid
from .mdp import empirical_start_distribution, evaluate_start_value, policy_iteration
from .ope import soften_policy, trajectory_returns, wis_evaluate
from .policy import DeterministicPolicy, StochasticPolicy

log = logging.getLogger(__name__)

POLICY_NAMES = ("ai", "clinician", "zero_drug", "random")


@dataclass(frozen=True)
class ExperimentConfig:
    n_realizations: int = 500
    k: int = 750
    bin_width_h: float = 1.0
    gamma: float = 0.99
    epsilon: float = 0.01
    min_count: int = 5
    smoothing: float = 0.0
    behavior_delta: float = 0.01
    train_fraction: float = 0.8
    refit_clustering_per_realization: bool = True
    percentile: float = 95.0
    seed: int = 0
    threads: int = 1
    shaping: ShapingConfig = field(default_factory=ShapingConfig)

    def __post_init__(self):
        if self.n_realizations < 1:
            raise ConfigError("n_realizations must be >= 1")
        if not 0 < self.percentile <= 100:
            raise ConfigError("percentile must lie in (0, 100]")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.k < 1 or self.min_count < 0 or self.threads < 1:
            raise ConfigError("k and threads must be >= 1, min_count >= 0")
        if isinstance(self.shaping, dict):
            object.__setattr__(self, "shaping", ShapingConfig(**self.shaping))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RealizationResult:
    seed: int
    model_value: dict[str, float]
    wis_value: dict[str, float]
    learned_policy: DeterministicPolicy
    ess: dict[str, float] = field(default_factory=dict)
    heldout_mean_return: float = math.nan
    pi_iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model_value": self.model_value,
            "wis_value": self.wis_value,
            "ess": self.ess,
            "heldout_mean_return": self.heldout_mean_return,
            "pi_iterations": self.pi_iterations,
        }


@dataclass(frozen=True)
class RealizationFailure:
    seed: int
    error: str


@dataclass(eq=False)
class ExperimentOutcome:
    config: ExperimentConfig
    results: list[RealizationResult]
    failures: list[RealizationFailure]


# --------------------------------------------------------------------------- #
# baseline policies
# --------------------------------------------------------------------------- #

def make_zero_drug_policy(k: int, model: MdpModel | None = None) -> DeterministicPolicy:
    """Action 0 everywhere.  Given a model, planned states where action 0 is
    unsupported get their lowest supported action instead."""
    actions = np.zeros(k, dtype=np.int64)
    if model is not None:
        if model.k != k:
            raise DataError(f"model has {model.k} states, expected {k}")
        sup = model.support[:k]
        swap = model.active & ~sup[:, 0]
        actions[swap] = np.argmax(sup[swap], axis=1)
        if swap.any():
            log.info("zero-drug policy: %d states without support for action 0 use their lowest supported action",
                     int(swap.sum()))
    return DeterministicPolicy(actions, model.n_actions if model is not None else 25)


def make_random_policy(model: MdpModel) -> StochasticPolicy:
    """Uniform over the supported actions of each state (all actions where
    nothing is supported)."""
    sup = model.support[: model.k].astype(float)
    n = sup.sum(axis=1, keepdims=True)
    probs = np.where(n > 0, sup / np.where(n > 0, n, 1), 1.0 / model.n_actions)
    return StochasticPolicy(probs)


def value_to_mortality(v: float) -> float:
    """Mortality implied by a start value under terminal-only +-100 rewards, gamma 1."""
    v = float(v)
    if not -100.0 <= v <= 100.0:
        raise ValueError(f"value {v} outside [-100, 100]")
    return (100.0 - v) / 200.0


# --------------------------------------------------------------------------- #
# realizations
# --------------------------------------------------------------------------- #

def split_patients(n: int, train_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Held-out patients are a random ``1 - train_fraction`` share; the
    training set is a bootstrap resample (with replacement) of the rest."""
    if n < 2:
        raise DataError("need at least two patients to split")
    perm = rng.permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    train_pool, held = perm[:n_train], np.sort(perm[n_train:])
    train = np.sort(rng.choice(train_pool, size=n_train, replace=True))
    return train, held


@dataclass(frozen=True, eq=False)
class _Shared:
    binned: list[BinnedTrajectory]
    grid: ActionGrid | None
    state_model: StateModel | None


def _one_realization(r: int, shared: _Shared, config: ExperimentConfig) -> RealizationResult:
    rng = np.random.default_rng([config.seed, r])
    train_idx, held_idx = split_patients(len(shared.binned), config.train_fraction, rng)
    train_b = [shared.binned[i] for i in train_idx]
    held_b = [shared.binned[i] for i in held_idx]

    if config.refit_clustering_per_realization:
        grid = fit_action_grid(train_b)
        state_model = fit_state_model(train_b, k=config.k, seed=int(rng.integers(2**31)))
    else:
        grid, state_model = shared.grid, shared.state_model
    train = discretize_cohort(train_b, state_model, grid)
    held = discretize_cohort(held_b, state_model, grid)

    model = normalize_transitions(
        count_transitions(train), min_count=config.min_count, smoothing=config.smoothing, gamma=config.gamma
    )
    model = apply_reward_shaping(model, state_model, config.shaping)
    start = empirical_start_distribution(train)
    k = model.k

    pi = policy_iteration(model)
    clinician_model = restrict_to_support(estimate_behavior_policy(train, delta=0.0), model)
    zero = make_zero_drug_policy(k, model)
    rand = make_random_policy(model)
    model_value = {
        "ai": evaluate_start_value(model, pi.policy, start),
        "clinician": evaluate_start_value(model, clinician_model, start),
        "zero_drug": evaluate_start_value(model, zero, start),
        "random": evaluate_start_value(model, rand, start),
    }

    behavior = estimate_behavior_policy(train, delta=config.behavior_delta)
    evals = {
        "ai": soften_policy(pi.policy, config.epsilon),
        "clinician": behavior,
        "zero_drug": soften_policy(zero, config.epsilon),
        "random": rand,
    }
    wis_value, ess = {}, {}
    heldout_returns = trajectory_returns(held, model.reward, config.gamma)
    for name in POLICY_NAMES:
        try:
            rep = wis_evaluate(held, evals[name], behavior, config.gamma, model.reward, config.epsilon)
            wis_value[name], ess[name] = rep.estimate, rep.ess
        except DataError:
            # every held-out weight is zero: the estimate is undefined
            wis_value[name], ess[name] = math.nan, 0.0
    return RealizationResult(
        seed=r, model_value=model_value, wis_value=wis_value, learned_policy=pi.policy,
        ess=ess, heldout_mean_return=float(heldout_returns.mean()), pi_iterations=pi.iterations,
    )


def _attempt(r: int, shared: _Shared, config: ExperimentConfig):
    try:
        return _one_realization(r, shared, config)
    except (DataError, NumericalError) as exc:
        log.warning("realization %d failed: %s", r, exc)
        return RealizationFailure(r, f"{type(exc).__name__}: {exc}")


def run_realizations(
    cohort: Sequence[RawTrajectory] | Sequence[BinnedTrajectory], config: ExperimentConfig
) -> ExperimentOutcome:
    """Run ``config.n_realizations`` independent bootstrap realizations.

    Realization ``r`` draws from ``default_rng([config.seed, r])``, so results
    do not depend on thread count or scheduling.  Failed realizations are
    recorded and skipped.
    """
    if not cohort:
        raise DataError("empty cohort")
    if isinstance(cohort[0], RawTrajectory):
        binned = bin_cohort(cohort, config.bin_width_h)
    else:
        binned = list(cohort)
    grid = state_model = None
    if not config.refit_clustering_per_realization:
        grid = fit_action_grid(binned)
        state_model = fit_state_model(binned, k=config.k, seed=config.seed)
    shared = _Shared(binned, grid, state_model)

    seeds = range(config.n_realizations)
    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            outs = list(pool.map(lambda r: _attempt(r, shared, config), seeds))
    else:
        outs = [_attempt(r, shared, config) for r in seeds]
    results = [o for o in outs if isinstance(o, RealizationResult)]
    failures = [o for o in outs if isinstance(o, RealizationFailure)]
    if failures:
        log.warning("%d of %d realizations failed", len(failures), config.n_realizations)
    return ExperimentOutcome(config, results, failures)


def nearest_rank(values: Sequence[float], percentile: float) -> int:
    """Index (into ``values``) of the nearest-rank percentile; ties go to
    the earliest entry."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise DataError("no values")
    if not 0 < percentile <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    rank = max(1, math.ceil(percentile / 100.0 * v.size))
    target = np.sort(v, kind="stable")[rank - 1]
    return int(np.flatnonzero(v == target)[0])


def select_best_policy(results: Sequence[RealizationResult], percentile: float = 95.0
                       ) -> tuple[DeterministicPolicy, float]:
    """Learned policy of the realization at the given nearest-rank
    percentile of AI model values."""
    if not results:
        raise DataError("no successful realizations to select from")
    i = nearest_rank([r.model_value["ai"] for r in results], percentile)
    return results[i].learned_policy, results[i].model_value["ai"]


# --------------------------------------------------------------------------- #
# outputs
# --------------------------------------------------------------------------- #

def _clean(x: float):
    return None if x is None or not math.isfinite(x) else x


def summarize(outcome: ExperimentOutcome) -> dict:
    cfg = outcome.config
    out = {
        "config": cfg.to_dict(),
        "n_realizations": cfg.n_realizations,
        "n_succeeded": len(outcome.results),
        "n_failed": len(outcome.failures),
        "failures": [asdict(f) for f in outcome.failures],
        "realizations": [
            {**r.to_dict(),
             "wis_value": {k: _clean(v) for k, v in r.wis_value.items()}}
            for r in outcome.results
        ],
    }
    dist = {}
    for kind in ("model_value", "wis_value"):
        dist[kind] = {}
        for name in POLICY_NAMES:
            v = np.array([getattr(r, kind)[name] for r in outcome.results], dtype=float)
            v = v[np.isfinite(v)]
            dist[kind][name] = (
                {"n": int(v.size), "mean": float(v.mean()), "median": float(np.median(v)),
                 "p5": float(np.percentile(v, 5)), "p95": float(np.percentile(v, 95))}
                if v.size else {"n": 0}
            )
    out["distribution"] = dist
    if outcome.results:
        i = nearest_rank([r.model_value["ai"] for r in outcome.results], cfg.percentile)
        best = outcome.results[i]
        out["selected"] = {
            "percentile": cfg.percentile,
            "realization": best.seed,
            "ai_model_value": best.model_value["ai"],
            "policy": best.learned_policy.actions.tolist(),
        }
    return out


def write_summary(outcome: ExperimentOutcome, path: str | Path) -> None:
    Path(path).write_text(json.dumps(summarize(outcome), indent=1, sort_keys=True) + "\n")


def write_value_distribution(outcome: ExperimentOutcome, path: str | Path) -> None:
    """Long-format CSV: ``realization,policy,model_value,wis_value,ess``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["realization", "policy", "model_value", "wis_value", "ess"])
        for r in outcome.results:
            for name in POLICY_NAMES:
                w.writerow([r.seed, name, repr(r.model_value[name]), repr(r.wis_value[name]),
                            repr(r.ess.get(name, math.nan))])
