"""Synthetic ICU trajectories from a known MDP, with exact oracles.

The true world has ``n`` severity-ordered states (0 = mildest) plus the two
terminals, 25 joint dose actions and a behaviour (clinician) policy.  Each
true step lasts ``step_h`` hours and is observed through several sub-step
records whose MAP and auxiliary features are emitted around per-state
means.  Because the tensor is known, policy values, mortality and
vasopressor exposure can be computed exactly by linear solves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.optimize import brentq

from .discretize import DiscretizedCohort
from .errors import DataError
from .estimate import MdpModel
from .ingest import MAP_FEATURE, N_ACTIONS, N_LEVELS, Outcome, RawTrajectory
from .mdp import policy_evaluation, start_value
from .policy import Policy, StochasticPolicy

AUX_FEATURES = ("heart_rate", "lactate")
_ARRAY_FIELDS = ("transitions", "behavior", "start_distribution", "map_mean", "aux_means", "aux_noise")


@dataclass(frozen=True, eq=False)
class GeneratorConfig:
    n_states_true: int
    n_patients: int
    transitions: np.ndarray
    behavior: np.ndarray
    start_distribution: np.ndarray
    map_mean: np.ndarray
    aux_means: np.ndarray
    aux_noise: np.ndarray
    aux_names: tuple[str, ...] = AUX_FEATURES
    map_noise: float = 1.0
    max_horizon_bins: int = 200
    step_h: float = 1.0
    record_spacing_h: float = 0.25
    fluid_bounds: tuple[float, ...] = (0.0, 50.0, 150.0, 400.0, 1000.0)
    vaso_bounds: tuple[float, ...] = (0.0, 0.08, 0.2, 0.45, 1.0)
    fast_dynamics: bool = False
    dip_depth: float = 25.0
    confound_strength: float = 0.0
    gamma: float = 0.99
    seed: int = 0

    def __post_init__(self):
        n, A = self.n_states_true, N_ACTIONS
        T = np.asarray(self.transitions, dtype=float)
        B = np.asarray(self.behavior, dtype=float)
        d = np.asarray(self.start_distribution, dtype=float)
        if T.shape != (n, A, n + 2):
            raise DataError(f"transitions must be ({n}, {A}, {n + 2})")
        if np.any(T < 0) or not np.allclose(T.sum(axis=2), 1.0, atol=1e-9):
            raise DataError("true transition rows must be nonnegative and sum to 1")
        if B.shape != (n, A) or np.any(B < 0) or not np.allclose(B.sum(axis=1), 1.0, atol=1e-9):
            raise DataError("behavior rows must be nonnegative and sum to 1")
        if d.shape != (n,) or np.any(d < 0) or abs(d.sum() - 1) > 1e-9:
            raise DataError("start distribution must be a probability vector over true states")
        if self.n_patients < 0 or self.max_horizon_bins < 1:
            raise DataError("n_patients must be >= 0 and max_horizon_bins >= 1")
        if not 0 < self.record_spacing_h <= self.step_h:
            raise DataError("record spacing must lie in (0, step_h]")
        for name in ("fluid_bounds", "vaso_bounds"):
            b = getattr(self, name)
            if len(b) != N_LEVELS or b[0] != 0 or any(y <= x for x, y in zip(b, b[1:])):
                raise DataError(f"{name} must be 5 increasing bounds starting at 0")
        object.__setattr__(self, "transitions", T)
        object.__setattr__(self, "behavior", B)
        object.__setattr__(self, "start_distribution", d)
        object.__setattr__(self, "map_mean", np.asarray(self.map_mean, dtype=float))
        object.__setattr__(self, "aux_means", np.asarray(self.aux_means, dtype=float).reshape(n, -1))
        object.__setattr__(self, "aux_noise", np.asarray(self.aux_noise, dtype=float))
        object.__setattr__(self, "aux_names", tuple(self.aux_names))
        object.__setattr__(self, "fluid_bounds", tuple(float(x) for x in self.fluid_bounds))
        object.__setattr__(self, "vaso_bounds", tuple(float(x) for x in self.vaso_bounds))

    @property
    def feature_names(self) -> tuple[str, ...]:
        return (MAP_FEATURE, *self.aux_names)

    @property
    def records_per_step(self) -> int:
        return max(1, int(round(self.step_h / self.record_spacing_h)))

    def severity(self) -> np.ndarray:
        """0 for the highest-MAP state, 1 for the lowest."""
        m = self.map_mean
        span = m.max() - m.min()
        return (m.max() - m) / span if span > 0 else np.zeros_like(m)

    def true_model(self, gamma: float | None = None) -> MdpModel:
        return MdpModel.from_tensor(
            self.transitions,
            gamma=self.gamma if gamma is None else gamma,
            support=np.vstack([np.ones_like(self.behavior, dtype=bool),
                               np.zeros((2, N_ACTIONS), dtype=bool)]),
        )

    def to_dict(self) -> dict:
        out = {}
        for f in self.__dataclass_fields__:
            v = getattr(self, f)
            out[f] = v.tolist() if isinstance(v, np.ndarray) else list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        kw = dict(d)
        for f in _ARRAY_FIELDS:
            kw[f] = np.array(kw[f], dtype=float)
        for f in ("aux_names", "fluid_bounds", "vaso_bounds"):
            if f in kw:
                kw[f] = tuple(kw[f])
        return cls(**kw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- #
# world construction
# --------------------------------------------------------------------------- #

def _dose_intensity() -> np.ndarray:
    f, v = np.divmod(np.arange(N_ACTIONS), N_LEVELS)
    return (f + v) / (2 * (N_LEVELS - 1))


def world_transitions(
    n: int,
    dose_benefit: float = 1.0,
    overdose_harm: float = 0.3,
    recovery_hazard: float = 0.12,
    death_hazard: float = 0.15,
    mobility: float = 0.6,
) -> np.ndarray:
    """Severity-chain dynamics, shape ``(n, 25, n + 2)``.

    Treatment intensity pushes sick states toward recovery (``dose_benefit``)
    and mild states toward deterioration (``overdose_harm``).  Survival is
    reached mostly from mild states, death mostly from severe ones.
    """
    x = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    tau = _dose_intensity()
    T = np.zeros((n, N_ACTIONS, n + 2))
    for s in range(n):
        eff = np.clip(dose_benefit * tau * x[s] - overdose_harm * tau * (1 - x[s]), -1, 1)
        p_surv = recovery_hazard * (1 - x[s]) ** 2
        p_death = np.clip(death_hazard * x[s] ** 2 * (1 - eff) + 0.02 * overdose_harm * tau, 0, 0.95)
        move = 1 - p_surv - p_death
        down = move * mobility * 0.5 * (1 + eff)
        up = move * mobility * 0.5 * (1 - eff)
        stay = move - down - up
        T[s, :, n] = p_surv
        T[s, :, n + 1] = p_death
        T[s, :, s] += stay
        T[s, :, max(s - 1, 0)] += down
        T[s, :, min(s + 1, n - 1)] += up
    return T


def severity_behavior(severity: np.ndarray, base_rate: float = 0.1, slope: float = 0.5) -> np.ndarray:
    """Dose with probability ``base_rate + slope * severity``, uniformly over
    the 24 nonzero actions."""
    p_dose = np.clip(base_rate + slope * severity, 0, 1)
    B = np.tile(p_dose[:, None] / (N_ACTIONS - 1), (1, N_ACTIONS))
    B[:, 0] = 1 - p_dose
    return B


def default_world(
    n_states_true: int = 20,
    n_patients: int = 1000,
    seed: int = 0,
    dose_benefit: float = 1.0,
    overdose_harm: float = 0.3,
    map_noise: float = 1.0,
    aux_noise_scale: float = 1.0,
    **kwargs,
) -> GeneratorConfig:
    """A 20-state (by default) world with separable per-state emissions.

    Auxiliary feature means are drawn once from ``seed`` so that states are
    well separated in feature space.
    """
    n = n_states_true
    rng = np.random.default_rng([seed, 7919])
    x = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    start = np.exp(-2.5 * x)
    aux_means = np.column_stack([
        70 + 60 * rng.permutation(n) / max(n - 1, 1),
        0.5 + 6 * rng.permutation(n) / max(n - 1, 1),
    ])
    return GeneratorConfig(
        n_states_true=n,
        n_patients=n_patients,
        transitions=world_transitions(n, dose_benefit, overdose_harm),
        behavior=severity_behavior(x),
        start_distribution=start / start.sum(),
        map_mean=90 - 40 * x,
        aux_means=aux_means,
        aux_noise=aux_noise_scale * np.array([1.0, 0.05]),
        map_noise=map_noise,
        seed=seed,
        **kwargs,
    )


def make_confounded_world(config: GeneratorConfig, confound_strength: float) -> GeneratorConfig:
    """Tie dosing to severity: ``P(no dose | s) = (1-c) P_base(0|s) + c (1 - sev(s))``.

    Nonzero-action mass is rescaled in proportion to the base policy (uniform
    if the base never doses).  At ``c = 1`` the mildest state is never dosed
    and the sickest always is.
    """
    c = float(confound_strength)
    if not 0 <= c <= 1:
        raise ValueError("confound_strength must lie in [0, 1]")
    if c == 0:
        return config
    sev = config.severity()
    B = config.behavior
    p0 = (1 - c) * B[:, 0] + c * (1 - sev)
    nonzero = B[:, 1:].copy()
    mass = nonzero.sum(axis=1, keepdims=True)
    nonzero = np.where(mass > 0, nonzero / np.where(mass > 0, mass, 1), 1.0 / (N_ACTIONS - 1))
    newB = np.column_stack([p0, nonzero * (1 - p0)[:, None]])
    return replace(config, behavior=newB, confound_strength=c)


# --------------------------------------------------------------------------- #
# oracles
# --------------------------------------------------------------------------- #

def oracle_policy_value(config: GeneratorConfig, policy: Policy | None = None, gamma: float | None = None) -> float:
    """Exact start value on the true tensor (behaviour policy if ``policy`` is None)."""
    policy = StochasticPolicy(config.behavior) if policy is None else policy
    values = policy_evaluation(config.true_model(gamma), policy)
    return start_value(values, config.start_distribution)


def absorption_probabilities(config: GeneratorConfig, policy: Policy | None = None) -> np.ndarray:
    """Per-state probability of ending in the survival terminal."""
    probs = config.behavior if policy is None else policy.probabilities()
    n = config.n_states_true
    P = np.einsum("sa,sat->st", probs, config.transitions)
    return np.linalg.solve(np.eye(n) - P[:, :n], P[:, n])


def oracle_mortality(config: GeneratorConfig, policy: Policy | None = None) -> float:
    return float(1.0 - config.start_distribution @ absorption_probabilities(config, policy))


def oracle_vaso_exposure(config: GeneratorConfig) -> float:
    """Exact probability that a patient ever receives a vasopressor dose."""
    n = config.n_states_true
    no_vaso = (np.arange(N_ACTIONS) % N_LEVELS) == 0
    B = config.behavior * no_vaso
    M = np.einsum("sa,sat->st", B, config.transitions)
    u = np.linalg.solve(np.eye(n) - M[:, :n], M[:, n:].sum(axis=1))
    return float(1.0 - config.start_distribution @ u)


def calibrate_vaso_exposure(config: GeneratorConfig, target: float) -> GeneratorConfig:
    """Scale vasopressor-positive behaviour mass (moving it to the same fluid
    level without vasopressor) until the exact exposure equals ``target``."""
    if not 0 <= target <= oracle_vaso_exposure(config):
        raise ValueError("target exposure outside what this behaviour policy can reach")
    vaso_pos = (np.arange(N_ACTIONS) % N_LEVELS) > 0
    fluid_only = (np.arange(N_ACTIONS) // N_LEVELS) * N_LEVELS

    def scaled(lam: float) -> GeneratorConfig:
        B = config.behavior.copy()
        moved = B[:, vaso_pos] * (1 - lam)
        B[:, vaso_pos] *= lam
        np.add.at(B.T, fluid_only[vaso_pos], moved.T)
        return replace(config, behavior=B)

    lam = brentq(lambda l: oracle_vaso_exposure(scaled(l)) - target, 0.0, 1.0, xtol=1e-14)
    return scaled(lam)


# --------------------------------------------------------------------------- #
# simulation
# --------------------------------------------------------------------------- #

@dataclass
class SimulatedCohort:
    trajectories: list[RawTrajectory]
    true_states: list[np.ndarray] = field(default_factory=list)
    true_actions: list[np.ndarray] = field(default_factory=list)

    def to_discretized(self, k: int) -> DiscretizedCohort:
        """Ground-truth (state, action) sequences in the true state space."""
        return DiscretizedCohort.from_sequences(
            k,
            [(t.patient_id, s, a, t.outcome.died)
             for t, s, a in zip(self.trajectories, self.true_states, self.true_actions)],
        )


def _draw(cum: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cum, u, side="right")), cum.shape[0] - 1)


def _level_dose(level: int, bounds: tuple[float, ...], u: float) -> float:
    if level == 0:
        return 0.0
    lo, hi = bounds[level - 1], bounds[level]
    return lo + (hi - lo) * (1.0 - u)


def simulate(config: GeneratorConfig) -> SimulatedCohort:
    """Simulate the cohort, one independent random stream per patient."""
    n = config.n_states_true
    H = config.max_horizon_bins
    r = config.records_per_step
    beh_cum = np.cumsum(config.behavior, axis=1)
    T_cum = np.cumsum(config.transitions, axis=2)
    start_cum = np.cumsum(config.start_distribution)
    survive = absorption_probabilities(config)
    m = len(config.aux_names)
    offsets = np.arange(r) * config.record_spacing_h

    out = SimulatedCohort([])
    width = len(str(max(config.n_patients - 1, 0)))
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_patients)
    for i, ss in enumerate(seeds):
        rng = np.random.Generator(np.random.PCG64(ss))
        u = rng.random((H, 4))
        s = _draw(start_cum, rng.random())
        states, actions = [], []
        outcome = None
        for t in range(H):
            a = _draw(beh_cum[s], u[t, 0])
            states.append(s)
            actions.append(a)
            nxt = _draw(T_cum[s, a], u[t, 1])
            if nxt >= n:
                outcome = Outcome.DIED if nxt == n + 1 else Outcome.SURVIVED
                break
            s = nxt
        if outcome is None:
            # horizon reached: draw the outcome with its exact absorption probability
            outcome = Outcome.SURVIVED if rng.random() < survive[s] else Outcome.DIED
        L = len(states)
        st = np.array(states)
        ac = np.array(actions)
        f_lvl, v_lvl = np.divmod(ac, N_LEVELS)
        fluid_step = np.array([_level_dose(f, config.fluid_bounds, u[t, 2]) for t, f in enumerate(f_lvl)])
        vaso_step = np.array([_level_dose(v, config.vaso_bounds, u[t, 3]) for t, v in enumerate(v_lvl)])

        rec_state = np.repeat(st, r)
        times = (np.arange(L)[:, None] * config.step_h + offsets[None, :]).ravel()
        noise = rng.standard_normal((L * r, 1 + m))
        map_ = config.map_mean[rec_state] + config.map_noise * noise[:, 0]
        aux = config.aux_means[rec_state] + config.aux_noise * noise[:, 1:]
        fluid = np.repeat(fluid_step / r, r)
        if config.fast_dynamics:
            vaso = np.zeros(L * r)
            dip = rng.integers(r, size=L)
            dosed = np.flatnonzero(vaso_step > 0)
            at = dosed * r + dip[dosed]
            map_[at] -= config.dip_depth
            vaso[at] = vaso_step[dosed]
            nxt_rec = dip[dosed] + 1 < r
            vaso[at[nxt_rec] + 1] = vaso_step[dosed[nxt_rec]]
        else:
            vaso = np.repeat(vaso_step, r)

        out.trajectories.append(
            RawTrajectory(
                patient_id=f"p{i:0{width}d}",
                time_h=times,
                feature_names=config.feature_names,
                features=np.column_stack([map_, aux]),
                fluid_ml=fluid,
                vaso_rate=vaso,
                outcome=outcome,
            )
        )
        out.true_states.append(st)
        out.true_actions.append(ac)
    return out


def generate_cohort(config: GeneratorConfig) -> list[RawTrajectory]:
    """Ingest-compatible raw trajectories simulated from ``config``."""
    return simulate(config).trajectories


def simulate_chain(
    transitions: np.ndarray,
    behavior: np.ndarray,
    start_distribution: np.ndarray,
    n_patients: int,
    rng: np.random.Generator,
    max_steps: int = 100_000,
) -> DiscretizedCohort:
    """Vectorised state/action chains (no records) for estimator checks.

    ``transitions`` is ``(k, A, k+2)`` and ``behavior`` ``(k, A)``.
    """
    k, A, _ = transitions.shape
    T_cum = np.cumsum(transitions, axis=2)
    B_cum = np.cumsum(behavior, axis=1)
    s = np.minimum((rng.random(n_patients)[:, None] >= np.cumsum(start_distribution)).sum(1), k - 1)
    alive = np.arange(n_patients)
    died = np.zeros(n_patients, dtype=bool)
    rec_p, rec_s, rec_a = [], [], []
    for _ in range(max_steps):
        if alive.size == 0:
            break
        a = np.minimum((rng.random(alive.size)[:, None] >= B_cum[s]).sum(1), A - 1)
        rec_p.append(alive)
        rec_s.append(s)
        rec_a.append(a)
        nxt = np.minimum((rng.random(alive.size)[:, None] >= T_cum[s, a]).sum(1), k + 1)
        term = nxt >= k
        died[alive[term]] = nxt[term] == k + 1
        alive, s = alive[~term], nxt[~term]
    else:
        raise RuntimeError("chains did not absorb within max_steps")
    p = np.concatenate(rec_p) if rec_p else np.empty(0, dtype=np.int64)
    order = np.argsort(p, kind="stable")
    lengths = np.bincount(p, minlength=n_patients)
    return DiscretizedCohort(
        k=k,
        patient_ids=tuple(str(i) for i in range(n_patients)),
        offsets=np.concatenate([[0], np.cumsum(lengths)]),
        states=np.concatenate(rec_s)[order] if rec_s else np.empty(0, dtype=np.int64),
        actions=np.concatenate(rec_a)[order] if rec_a else np.empty(0, dtype=np.int64),
        died=died,
        n_actions=A,
    )
