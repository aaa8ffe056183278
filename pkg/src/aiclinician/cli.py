"""Command-line front end.

Every subcommand writes its artifacts into ``--out`` together with a
``manifest.json`` (config echo, seed, input digests, artifact digests).
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure; errors are reported as one line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import diagnostics as diag
from .config import PipelineConfig, load_config, with_overrides
from .discretize import DiscretizedCohort, StateModel, discretize_cohort, fit_state_model
from .errors import ConfigError, DataError, NumericalError
from .estimate import (
    MdpModel,
    apply_reward_shaping,
    count_transitions,
    estimate_behavior_policy,
    goodness_of_fit,
    normalize_transitions,
    restrict_to_support,
)
from .experiment import (
    make_random_policy,
    make_zero_drug_policy,
    run_realizations,
    select_best_policy,
    write_summary,
    write_value_distribution,
)
from .ingest import ActionGrid, bin_cohort, fit_action_grid, parse_trajectories, write_binned, write_trajectories
from .mdp import empirical_start_distribution, evaluate_start_value, policy_evaluation, policy_iteration
from .ope import soften_policy, wis_evaluate, weight_collapse_report
from .policy import DeterministicPolicy, StochasticPolicy
from .simgen import (
    default_world,
    generate_cohort,
    make_confounded_world,
    oracle_mortality,
    oracle_policy_value,
    oracle_vaso_exposure,
)

log = logging.getLogger("aiclinician")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


class Run:
    """Collects inputs and artifacts for the manifest."""

    def __init__(self, command: str, config: PipelineConfig, out: Path):
        self.command = command
        self.config = config
        self.out = out
        self.inputs: dict[str, str] = {}
        self.artifacts: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def input(self, path: str | Path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"input file not found: {p}")
        self.inputs[str(path)] = _sha256(p)
        return p

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def write_manifest(self) -> None:
        manifest = {
            "command": self.command,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "inputs": self.inputs,
            "artifacts": {
                name: {"path": name, "sha256": _sha256(self.out / name)} for name in sorted(self.artifacts)
            },
        }
        _dump(manifest, self.out / "manifest.json")


# --------------------------------------------------------------------------- #
# fit-directory helpers
# --------------------------------------------------------------------------- #

def _load_fit(run: Run, fit_dir: str):
    d = Path(fit_dir)
    grid = ActionGrid.from_dict(json.loads(run.input(d / "grid.json").read_text()))
    state_model = StateModel.load(run.input(d / "state_model.json"))
    run.input(d / "mdp.json")
    run.input(d / "mdp.csv")
    model = MdpModel.load(d / "mdp")
    return grid, state_model, model


def _load_policy(run: Run, path: str, k: int):
    p = run.input(path)
    header = p.read_text().split("\n", 1)[0].strip()
    policy = DeterministicPolicy.load_csv(p) if header == "state_id,action_id" else StochasticPolicy.load_csv(p)
    if policy.k != k:
        raise DataError(f"policy {path} covers {policy.k} states, model has {k}")
    return policy


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #

def cmd_simulate(args, config: PipelineConfig, run: Run) -> None:
    s = config.simulate
    world = default_world(
        n_states_true=s.n_states_true,
        n_patients=s.n_patients,
        seed=config.seed,
        dose_benefit=s.dose_benefit,
        overdose_harm=s.overdose_harm,
        map_noise=s.map_noise,
        max_horizon_bins=s.max_horizon_bins,
        fast_dynamics=s.fast_dynamics,
        gamma=config.gamma,
    )
    world = make_confounded_world(world, s.confound_strength)
    write_trajectories(generate_cohort(world), run.path("cohort.csv"))
    world.save(run.path("generator.json"))
    zero = DeterministicPolicy(np.zeros(world.n_states_true, dtype=np.int64))
    opt = policy_iteration(world.true_model())
    oracle = {
        "behavior_value": oracle_policy_value(world),
        "zero_drug_value": oracle_policy_value(world, zero),
        "optimal_value": float(world.start_distribution @ opt.values.v[: world.n_states_true]),
        "behavior_mortality": oracle_mortality(world),
        "vaso_exposure": oracle_vaso_exposure(world),
    }
    _dump(oracle, run.path("oracle.json"))


def cmd_ingest(args, config: PipelineConfig, run: Run) -> None:
    raw = parse_trajectories(run.input(args.input))
    binned = bin_cohort(raw, config.bin_width_h, config.aggregation)
    write_binned(binned, run.path("binned.csv"))
    _dump(
        {
            "n_patients": len(raw),
            "n_records": int(sum(t.n_records for t in raw)),
            "n_bins": int(sum(b.n_bins for b in binned)),
            "mortality": float(np.mean([t.outcome.died for t in raw])) if raw else None,
            "vaso_exposure": diag.vasopressor_exposure(raw),
        },
        run.path("ingest.json"),
    )


def cmd_fit(args, config: PipelineConfig, run: Run) -> None:
    raw = parse_trajectories(run.input(args.input))
    binned = bin_cohort(raw, config.bin_width_h, config.aggregation)
    grid = fit_action_grid(binned)
    state_model = fit_state_model(binned, k=config.k, seed=config.seed)
    cohort = discretize_cohort(binned, state_model, grid)
    model = normalize_transitions(
        count_transitions(cohort), min_count=config.min_count, smoothing=config.smoothing, gamma=config.gamma
    )
    model = apply_reward_shaping(model, state_model, config.shaping)

    _dump(grid.to_dict(), run.path("grid.json"))
    state_model.save(run.path("state_model.json"))
    cohort.write_csv(run.path("discretized.csv"))
    run.path("mdp.json")
    run.path("mdp.csv")
    model.save(run.out / "mdp")
    estimate_behavior_policy(cohort, config.behavior_delta).save_csv(run.path("behavior_policy.csv"))


def cmd_plan(args, config: PipelineConfig, run: Run) -> None:
    _, _, model = _load_fit(run, args.fit)
    cohort = DiscretizedCohort.read_csv(run.input(Path(args.fit) / "discretized.csv"), model.k)
    result = policy_iteration(model)
    result.policy.save_csv(run.path("policy.csv"))
    pd.DataFrame({"state_id": np.arange(model.n_states), "value": result.values.v}).to_csv(
        run.path("values.csv"), index=False, float_format="%.17g"
    )
    _dump(
        {
            "iterations": result.iterations,
            "start_value": evaluate_start_value(model, result.policy, empirical_start_distribution(cohort)),
            "residual": result.values.residual,
        },
        run.path("plan.json"),
    )


def cmd_evaluate(args, config: PipelineConfig, run: Run) -> None:
    _, _, model = _load_fit(run, args.fit)
    cohort_path = args.cohort or Path(args.fit) / "discretized.csv"
    cohort = DiscretizedCohort.read_csv(run.input(cohort_path), model.k)
    fit_cohort = DiscretizedCohort.read_csv(Path(args.fit) / "discretized.csv", model.k)
    behavior = estimate_behavior_policy(fit_cohort, config.behavior_delta)
    start = empirical_start_distribution(fit_cohort)

    zero = make_zero_drug_policy(model.k, model)
    policies = {
        "clinician": (restrict_to_support(estimate_behavior_policy(fit_cohort, 0.0), model), behavior),
        "zero_drug": (zero, soften_policy(zero, config.epsilon)),
        "random": (make_random_policy(model),) * 2,
    }
    if args.policy:
        p = _load_policy(run, args.policy, model.k)
        soft = soften_policy(p, config.epsilon) if isinstance(p, DeterministicPolicy) else p
        policies["policy"] = (p, soft)

    report = {}
    for name, (exact, soft) in policies.items():
        rep = wis_evaluate(cohort, soft, behavior, model.gamma, model.reward, config.epsilon)
        entry = {"model_value": start_value_or_none(model, exact, start), "wis": rep.to_dict(),
                 "collapse": weight_collapse_report(rep)}
        rep.save(run.path(f"wis_{name}.json"), run.path(f"weights_{name}.csv"))
        report[name] = entry
    _dump(report, run.path("evaluation.json"))


def start_value_or_none(model: MdpModel, policy, start) -> float | None:
    try:
        return float(start @ policy_evaluation(model, policy).v[: model.k])
    except DataError:
        return None  # policy uses unsupported actions: no model value


def cmd_experiment(args, config: PipelineConfig, run: Run) -> None:
    raw = parse_trajectories(run.input(args.input))
    outcome = run_realizations(bin_cohort(raw, config.bin_width_h, config.aggregation), config.experiment_config())
    write_summary(outcome, run.path("summary.json"))
    write_value_distribution(outcome, run.path("values.csv"))
    if not outcome.results:
        raise DataError(f"all {len(outcome.failures)} realizations failed")
    best, _ = select_best_policy(outcome.results, config.experiment.percentile)
    best.save_csv(run.path("best_policy.csv"))


def cmd_diagnose(args, config: PipelineConfig, run: Run) -> None:
    grid, state_model, model = _load_fit(run, args.fit)
    raw = parse_trajectories(run.input(args.input))
    binned = bin_cohort(raw, config.bin_width_h, config.aggregation)
    cohort = discretize_cohort(binned, state_model, grid)
    policy = _load_policy(run, args.policy, model.k) if args.policy else policy_iteration(model).policy
    if not isinstance(policy, DeterministicPolicy):
        raise DataError("diagnose needs a deterministic policy")
    d = config.diagnose

    diag.action_histogram(cohort).to_csv(run.path("action_histogram.csv"))
    for category in diag.CATEGORIES:
        diag.dose_excess_curve(
            cohort, policy, grid, category, n_bins=d.n_bins, n_boot=d.n_boot, units=d.units,
            model=model, seed=config.seed,
        ).to_csv(run.path(f"dose_excess_{category}.csv"), index=False, float_format="%.17g")
    diag.binning_aliasing_report(raw, d.widths).to_csv(run.path("aliasing.csv"), index=False, float_format="%.17g")
    frames = []
    for b in binned:
        t = diag.patient_timeline(b, policy, state_model, grid, model=model)
        t.insert(0, "patient_id", b.patient_id)
        frames.append(t)
    pd.concat(frames, ignore_index=True).to_csv(run.path("timelines.csv"), index=False, float_format="%.17g")
    _dump({"vaso_exposure": diag.vasopressor_exposure(raw), "n_patients": len(raw)}, run.path("exposure.json"))


def cmd_gof(args, config: PipelineConfig, run: Run) -> None:
    grid, state_model, model = _load_fit(run, args.fit)
    raw = parse_trajectories(run.input(args.heldout))
    heldout = discretize_cohort(bin_cohort(raw, config.bin_width_h, config.aggregation), state_model, grid)
    g = config.gof
    report = goodness_of_fit(model, heldout, n_mc=g.n_mc, alpha=g.alpha, seed=config.seed, min_heldout=g.min_heldout)
    report.to_frame().to_csv(run.path("gof.csv"), index=False, float_format="%.17g")
    _dump(report.summary(), run.path("gof.json"))


COMMANDS = {
    "simulate": (cmd_simulate, "generate a synthetic cohort with exact oracle values"),
    "ingest": (cmd_ingest, "validate and bin a trajectory CSV"),
    "fit": (cmd_fit, "fit action grid, state model and MDP"),
    "plan": (cmd_plan, "policy iteration on a fitted MDP"),
    "evaluate": (cmd_evaluate, "model values, WIS and ESS for the baseline policies"),
    "experiment": (cmd_experiment, "bootstrap realizations and best-policy selection"),
    "diagnose": (cmd_diagnose, "histograms, timelines, dose excess, aliasing, exposure"),
    "gof": (cmd_gof, "goodness-of-fit of the transition model on held-out data"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--threads", type=int, help="override config thread count")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="aiclinician", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parsers = {name: sub.add_parser(name, parents=[common], help=h) for name, (_, h) in COMMANDS.items()}
    for name in ("ingest", "fit", "experiment", "diagnose"):
        parsers[name].add_argument("--input", required=True, help="trajectory CSV")
    for name in ("plan", "evaluate", "diagnose", "gof"):
        parsers[name].add_argument("--fit", required=True, help="directory written by 'fit'")
    parsers["evaluate"].add_argument("--policy", help="policy CSV to evaluate alongside the baselines")
    parsers["evaluate"].add_argument("--cohort", help="discretized cohort CSV to evaluate on (default: the fit cohort)")
    parsers["diagnose"].add_argument("--policy", help="deterministic policy CSV (default: plan on the fitted MDP)")
    parsers["gof"].add_argument("--heldout", required=True, help="held-out trajectory CSV")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"aiclinician: error code={code} type={type(exc).__name__} message={json.dumps(msg)}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        config = with_overrides(load_config(args.config), seed=args.seed, threads=args.threads)
        run = Run(args.command, config, Path(args.out))
        COMMANDS[args.command][0](args, config, run)
        run.write_manifest()
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except (DataError, OSError, ValueError) as exc:
        return _fail(EXIT_DATA, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
