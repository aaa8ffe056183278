"""Weighted importance sampling with weight-collapse diagnostics.

Each trajectory gets a single final weight
``w = prod_t pi_e(a_t|s_t) / pi_b(a_t|s_t)``; the headline estimate is the
self-normalized ``sum(w G) / sum(w)``.  Ordinary (unnormalized) IS is
reported alongside for comparison.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .discretize import DiscretizedCohort
from .errors import DataError
from .policy import DeterministicPolicy, Policy, StochasticPolicy

NEAR_ZERO = 1e-6
COLLAPSE_ESS_FRACTION = 0.05


def soften_policy(policy: DeterministicPolicy, epsilon: float = 0.01) -> StochasticPolicy:
    """Chosen action gets ``1 - eps + eps/A``, every other action ``eps/A``."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    A = policy.n_actions
    probs = np.full((policy.k, A), epsilon / A)
    probs[np.arange(policy.k), policy.actions] = 1.0 - epsilon + epsilon / A
    return StochasticPolicy(probs)


@dataclass(frozen=True, eq=False)
class OpeReport:
    estimate: float
    is_estimate: float
    log_weights: np.ndarray
    returns: np.ndarray
    ess: float
    near_zero_fraction: float
    standard_error: float
    epsilon: float | None = None
    patient_ids: tuple[str, ...] = ()

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def n(self) -> int:
        return int(self.log_weights.shape[0])

    def normal_ci(self, level: float = 0.99) -> tuple[float, float]:
        from scipy.stats import norm

        z = norm.ppf(0.5 + level / 2)
        return self.estimate - z * self.standard_error, self.estimate + z * self.standard_error

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "is_estimate": self.is_estimate,
            "ess": self.ess,
            "n": self.n,
            "near_zero_fraction": self.near_zero_fraction,
            "standard_error": self.standard_error,
            "epsilon": self.epsilon,
        }

    def save(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        if csv_path is not None:
            ids = self.patient_ids or tuple(str(i) for i in range(self.n))
            with Path(csv_path).open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["patient_id", "weight", "return"])
                for pid, wt, g in zip(ids, self.weights, self.returns):
                    w.writerow([pid, repr(float(wt)), repr(float(g))])


def trajectory_returns(cohort: DiscretizedCohort, rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Discounted sum of entered-state rewards, terminal included."""
    rewards = np.asarray(rewards, dtype=float)
    if rewards.shape != (cohort.n_states,):
        raise DataError("rewards need one entry per state (k + 2)")
    step = np.arange(cohort.n_bins) - np.repeat(cohort.offsets[:-1], cohort.lengths)
    per_step = rewards[cohort.next_states()] * np.power(float(gamma), step)
    return np.bincount(cohort.patient_index, weights=per_step, minlength=cohort.n_patients)


def log_weights(cohort: DiscretizedCohort, eval_policy: Policy, behavior: Policy) -> np.ndarray:
    pe = eval_policy.probabilities()
    pb = behavior.probabilities()
    if pe.shape != (cohort.k, cohort.n_actions) or pb.shape != pe.shape:
        raise DataError("policies do not match the cohort's state/action space")
    num = pe[cohort.states, cohort.actions]
    den = pb[cohort.states, cohort.actions]
    zero = np.flatnonzero(den <= 0)
    if zero.size:
        i = zero[0]
        raise DataError(
            f"behavior policy gives probability 0 to observed pair "
            f"({cohort.states[i]}, {cohort.actions[i]})"
        )
    with np.errstate(divide="ignore"):
        step = np.log(num) - np.log(den)
    return np.bincount(cohort.patient_index, weights=step, minlength=cohort.n_patients)


def effective_sample_size(weights) -> float:
    """``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / (w @ w))


def wis_evaluate(
    cohort: DiscretizedCohort,
    eval_policy: Policy,
    behavior: Policy,
    gamma: float,
    rewards: np.ndarray,
    epsilon: float | None = None,
) -> OpeReport:
    """Weighted importance sampling estimate of ``eval_policy``'s value."""
    if cohort.n_patients == 0:
        raise DataError("empty cohort")
    returns = trajectory_returns(cohort, rewards, gamma)
    logw = log_weights(cohort, eval_policy, behavior)
    if np.all(np.isneginf(logw)):
        raise DataError("every importance weight is zero; evaluation policy never matches the data")
    shift = logw.max()
    rel = np.exp(logw - shift)  # scale-free weights for the ratio estimators
    total = rel.sum()
    estimate = float(rel @ returns / total)
    estimate = min(max(estimate, returns.min()), returns.max())
    ess = float(total**2 / (rel @ rel))
    n = cohort.n_patients
    weights = np.exp(logw)
    is_estimate = float(np.mean(weights * returns)) if np.all(np.isfinite(weights)) else math.inf
    # delta-method standard error of the self-normalized estimator
    se = float(math.sqrt(np.sum(rel**2 * (returns - estimate) ** 2)) / total)
    return OpeReport(
        estimate=estimate,
        is_estimate=is_estimate,
        log_weights=logw,
        returns=returns,
        ess=min(ess, float(n)),
        near_zero_fraction=float(np.mean(weights < NEAR_ZERO)),
        standard_error=se,
        epsilon=epsilon,
        patient_ids=cohort.patient_ids,
    )


def weight_collapse_report(report: OpeReport) -> dict:
    """ESS, near-zero weight share and top-1% weight share; flags collapse
    when ``ESS / n`` falls below 0.05."""
    logw = np.sort(report.log_weights)[::-1]
    n = logw.size
    top = max(1, math.ceil(0.01 * n))
    rel = np.exp(logw - logw[0])
    share = float(rel[:top].sum() / rel.sum())
    ess_fraction = report.ess / n
    return {
        "n": n,
        "ess": report.ess,
        "ess_fraction": ess_fraction,
        "near_zero_fraction": report.near_zero_fraction,
        "top1pct_weight_share": share,
        "collapse": bool(ess_fraction < COLLAPSE_ESS_FRACTION),
    }
