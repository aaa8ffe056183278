"""Exact policy evaluation and policy iteration on an :class:`MdpModel`.

Reward convention: a transition into ``s'`` earns ``r(s')`` undiscounted at
the step it happens, later steps are discounted by ``gamma``.  Terminal
states have value 0 once entered, so an action that reaches the survival
terminal immediately is worth exactly +100 whatever ``gamma`` is.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DataError, NumericalError
from .estimate import MdpModel
from .policy import DeterministicPolicy, Policy

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-8
FALLBACK_TOL = 1e-10
DENSE_LIMIT = 2000


class NonAbsorbingError(NumericalError):
    """gamma == 1 but some state cannot reach a terminal under the policy."""


@dataclass(frozen=True, eq=False)
class ValueVector:
    """State values (terminals and unplanned states are 0) and the derived
    action values ``q`` (NaN where unsupported)."""

    v: np.ndarray
    q: np.ndarray
    residual: float = 0.0

    def __getitem__(self, s):
        return self.v[s]


def _policy_matrix(model: MdpModel, policy: Policy) -> np.ndarray:
    probs = policy.probabilities()
    if probs.shape != (model.k, model.n_actions):
        raise DataError(f"policy shape {probs.shape} does not match model ({model.k}, {model.n_actions})")
    return probs


def action_values(model: MdpModel, v: np.ndarray) -> np.ndarray:
    """``Q(s, a) = sum_s' T[s, a, s'] (r(s') + gamma V(s'))`` for all pairs."""
    target = model.reward + model.gamma * v
    return (model.transitions @ target).reshape(model.n_states, model.n_actions)


def _check_inactive_unreachable(model: MdpModel) -> None:
    inactive = np.flatnonzero(~model.active)
    if inactive.size == 0:
        return
    sup_rows = np.flatnonzero(model.support.ravel())
    inflow = np.asarray(model.transitions[sup_rows][:, inactive].sum(axis=0)).ravel()
    if np.any(inflow > 0):
        s = inactive[np.argmax(inflow > 0)]
        raise DataError(f"state {s} has no supported action but is reachable")


def _absorbing_check(P_nn: sp.csr_matrix, exits: np.ndarray, idx: np.ndarray) -> None:
    """Every state must reach a terminal with positive probability."""
    reach = exits > 0
    graph = (P_nn > 0).astype(np.int8).tocsr()
    while True:
        new = reach | (np.asarray(graph @ reach.astype(np.int8)).ravel() > 0)
        if np.array_equal(new, reach):
            break
        reach = new
    if not reach.all():
        s = idx[np.argmin(reach)]
        raise NonAbsorbingError(f"gamma=1 but state {s} is recurrent (no terminal reachable)")


def _solve(A_mat: sp.csr_matrix, b: np.ndarray) -> np.ndarray:
    if A_mat.shape[0] <= DENSE_LIMIT:
        return np.linalg.solve(A_mat.toarray(), b)
    return spla.spsolve(A_mat.tocsc(), b)


def _value_iteration_fallback(P: sp.csr_matrix, R: np.ndarray, gamma: float, max_iter: int = 1_000_000):
    v = np.zeros_like(R)
    for _ in range(max_iter):
        nv = R + gamma * (P @ v)
        if np.max(np.abs(nv - v)) <= FALLBACK_TOL:
            return nv
        v = nv
    raise NumericalError("iterative policy evaluation did not converge")


def policy_evaluation(model: MdpModel, policy: Policy) -> ValueVector:
    """Solve ``V = R^pi + gamma P^pi V`` on the planned (active) states.

    With ``gamma == 1`` the chain induced by the policy must be absorbing;
    this is verified before solving.
    """
    probs = _policy_matrix(model, policy)
    k, A = model.k, model.n_actions
    active = model.active
    idx = np.flatnonzero(active)
    off = np.argwhere((probs[idx] > 0) & ~model.support[idx])
    if off.size:
        s, a = idx[off[0][0]], off[0][1]
        raise DataError(f"policy places mass on unsupported pair ({s}, {a})")
    _check_inactive_unreachable(model)

    n_idx = idx.size
    Pi = sp.csr_matrix(
        (probs[idx].ravel(), (np.repeat(np.arange(n_idx), A), (idx[:, None] * A + np.arange(A)).ravel())),
        shape=(n_idx, model.n_states * A),
    )
    P = (Pi @ model.transitions).tocsr()
    R = P @ model.reward
    P_nn = P[:, idx]
    exits = np.asarray(P[:, [k, k + 1]].sum(axis=1)).ravel()
    if model.gamma == 1.0:
        _absorbing_check(P_nn, exits, idx)

    system = sp.identity(n_idx, format="csr") - model.gamma * P_nn
    try:
        x = _solve(system, R)
        if not np.all(np.isfinite(x)):
            raise np.linalg.LinAlgError("non-finite solution")
    except (np.linalg.LinAlgError, RuntimeError) as exc:
        log.warning("direct solve failed (%s); falling back to iteration", exc)
        x = _value_iteration_fallback(P_nn, R, model.gamma)

    residual = float(np.max(np.abs(x - (R + model.gamma * (P_nn @ x))), initial=0.0))
    if residual > RESIDUAL_TOL:
        x = x + _solve(system, R - system @ x)
        residual = float(np.max(np.abs(x - (R + model.gamma * (P_nn @ x))), initial=0.0))
        if residual > RESIDUAL_TOL:
            raise NumericalError(f"policy evaluation residual {residual:.3e} exceeds {RESIDUAL_TOL}")

    v = np.zeros(model.n_states)
    v[idx] = x
    q = action_values(model, v)
    q[~model.support] = np.nan
    return ValueVector(v=v, q=q, residual=residual)


def greedy_actions(q: np.ndarray, support: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Argmax over supported actions, lowest id among (numerical) ties."""
    masked = np.where(support, q, -np.inf)
    best = masked.max(axis=1, keepdims=True)
    tol = rtol * np.maximum(1.0, np.abs(best))
    ties = support & (masked >= best - tol)
    return np.argmax(ties, axis=1)


def policy_improvement(model: MdpModel, values: ValueVector | np.ndarray) -> DeterministicPolicy:
    """Greedy policy over supported actions.

    States with no supported action (never observed) are not planned; they
    get action 0 as a placeholder.
    """
    v = values.v if isinstance(values, ValueVector) else np.asarray(values, dtype=float)
    if v.shape != (model.n_states,) or not np.all(np.isfinite(v)):
        raise DataError("value vector must be finite with one entry per state")
    _check_inactive_unreachable(model)
    q = action_values(model, v)[: model.k]
    sup = model.support[: model.k]
    actions = np.where(model.active, greedy_actions(q, sup), 0)
    return DeterministicPolicy(actions, model.n_actions)


def lowest_supported_policy(model: MdpModel) -> DeterministicPolicy:
    sup = model.support[: model.k]
    return DeterministicPolicy(np.where(sup.any(axis=1), np.argmax(sup, axis=1), 0), model.n_actions)


class PolicyIterationResult(NamedTuple):
    policy: DeterministicPolicy
    values: ValueVector
    iterations: int


def policy_iteration(model: MdpModel, max_iter: int = 1000, trace: list | None = None) -> PolicyIterationResult:
    """Alternate exact evaluation and greedy improvement until stable.

    Starts from the lowest supported action in every state.  When ``trace``
    is a list, the value vector of every evaluated policy is appended.
    """
    if not model.active.any():
        raise DataError("no state has a supported action")
    policy = lowest_supported_policy(model)
    for it in range(1, max_iter + 1):
        values = policy_evaluation(model, policy)
        if trace is not None:
            trace.append(values.v.copy())
        improved = policy_improvement(model, values)
        if improved == policy:
            return PolicyIterationResult(policy, values, it)
        policy = improved
    raise NumericalError(f"policy iteration did not stabilise in {max_iter} iterations")


def start_value(values: ValueVector | np.ndarray, start_distribution: np.ndarray) -> float:
    """Expected value under a distribution over (nonterminal) start states."""
    v = values.v if isinstance(values, ValueVector) else np.asarray(values, dtype=float)
    d = np.asarray(start_distribution, dtype=float)
    if np.any(d < 0) or abs(d.sum() - 1.0) > 1e-9:
        raise DataError("start distribution must be nonnegative and sum to 1")
    if d.shape[0] > v.shape[0]:
        raise DataError("start distribution longer than the value vector")
    return float(d @ v[: d.shape[0]])


def empirical_start_distribution(cohort) -> np.ndarray:
    """First-state frequencies of a discretized cohort (length k)."""
    counts = np.bincount(cohort.first_states, minlength=cohort.k).astype(float)
    return counts / counts.sum()


def evaluate_start_value(model: MdpModel, policy: Policy, start_distribution: np.ndarray) -> float:
    return start_value(policy_evaluation(model, policy), start_distribution)

