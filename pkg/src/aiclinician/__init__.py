"""Tabular offline reinforcement learning for ICU fluid/vasopressor dosing,
with the diagnostics needed to see where it goes wrong."""

from .discretize import DiscretizedCohort, StateModel, assign_state, discretize_cohort, fit_state_model
from .errors import ConfigError, DataError, NumericalError
from .estimate import (
    GofReport,
    MdpModel,
    ShapingConfig,
    apply_reward_shaping,
    count_transitions,
    estimate_behavior_policy,
    goodness_of_fit,
    normalize_transitions,
)
from .experiment import (
    ExperimentConfig,
    RealizationResult,
    make_random_policy,
    make_zero_drug_policy,
    run_realizations,
    select_best_policy,
    value_to_mortality,
)
from .ingest import (
    ActionGrid,
    BinnedTrajectory,
    Outcome,
    RawTrajectory,
    bin_trajectory,
    discretize_action,
    fit_action_grid,
    parse_trajectories,
)
from .mdp import ValueVector, policy_evaluation, policy_improvement, policy_iteration, start_value
from .ope import OpeReport, soften_policy, weight_collapse_report, wis_evaluate
from .policy import DeterministicPolicy, StochasticPolicy
from .simgen import GeneratorConfig, generate_cohort, make_confounded_world, oracle_policy_value

__version__ = "0.1.0"
