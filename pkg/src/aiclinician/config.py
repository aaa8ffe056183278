"""Pipeline configuration: one JSON document, command-line overrides on top."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .estimate import ShapingConfig
from .experiment import ExperimentConfig


@dataclass(frozen=True)
class SimulateSection:
    n_states_true: int = 20
    n_patients: int = 1000
    confound_strength: float = 0.0
    fast_dynamics: bool = False
    dose_benefit: float = 1.0
    overdose_harm: float = 0.3
    map_noise: float = 1.0
    max_horizon_bins: int = 200


@dataclass(frozen=True)
class ExperimentSection:
    n_realizations: int = 500
    train_fraction: float = 0.8
    refit_clustering_per_realization: bool = True
    percentile: float = 95.0


@dataclass(frozen=True)
class GofSection:
    n_mc: int = 1000
    alpha: float = 0.05
    min_heldout: int = 5


@dataclass(frozen=True)
class DiagnoseSection:
    widths: tuple[float, ...] = (1.0, 4.0)
    n_bins: int = 10
    n_boot: int = 1000
    units: str = "levels"


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    bin_width_h: float = 1.0
    aggregation: dict[str, str] = field(default_factory=dict)
    k: int = 750
    gamma: float = 0.99
    min_count: int = 5
    smoothing: float = 0.0
    behavior_delta: float = 0.01
    epsilon: float = 0.01
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    gof: GofSection = field(default_factory=GofSection)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)

    def __post_init__(self):
        if not self.bin_width_h > 0:
            raise ConfigError("bin_width_h must be > 0")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.k < 1 or self.threads < 1:
            raise ConfigError("k and threads must be >= 1")
        if self.min_count < 0 or self.smoothing < 0 or self.behavior_delta < 0:
            raise ConfigError("min_count, smoothing and behavior_delta must be >= 0")
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def experiment_config(self) -> ExperimentConfig:
        e = self.experiment
        return ExperimentConfig(
            n_realizations=e.n_realizations,
            k=self.k,
            bin_width_h=self.bin_width_h,
            gamma=self.gamma,
            epsilon=self.epsilon,
            min_count=self.min_count,
            smoothing=self.smoothing,
            behavior_delta=self.behavior_delta,
            train_fraction=e.train_fraction,
            refit_clustering_per_realization=e.refit_clustering_per_realization,
            percentile=e.percentile,
            seed=self.seed,
            threads=self.threads,
            shaping=self.shaping,
        )


def _build(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key {where}{unknown[0]}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            value = _build(type(current), value, f"{where}{name}.")
        elif isinstance(current, tuple):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: Mapping[str, Any]) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON (line {exc.lineno})") from exc
    return config_from_dict(data)


def with_overrides(config: PipelineConfig, **overrides) -> PipelineConfig:
    """Apply non-None top-level overrides (e.g. ``seed``, ``threads``)."""
    given = {k: v for k, v in overrides.items() if v is not None}
    try:
        return replace(config, **given)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
