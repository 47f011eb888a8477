"""Experiment configuration: one nested, JSON-compatible schema.

The schema is strict both ways: unknown keys are rejected with their
dotted path, and parse -> serialize -> parse is an identity. ``seed`` is
the only required field; everything else has a documented default, so a
minimal config is ``{"seed": 0}``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation
from .likelihood import EstimatorConfig
from .objectives import ObjectiveConfig
from .oracles import RewardSpec
from .samplers import SDE_EULER, SamplerConfig
from .training import TrainConfig


@dataclass
class ModelConfig:
    hidden: list = dataclass_field(default_factory=lambda: [32, 32])
    embed_dim: int = 4

    def validate(self) -> None:
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise ConfigError("hidden sizes must be positive", field="model.hidden")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive", field="model.embed_dim")


@dataclass
class ExperimentConfig:
    seed: int
    data_dim: int = 1
    n_conditions: int = 1
    ref_means: list | float = 0.0  # scalar, [d], or [C][d]
    ref_vars: list | float = 1.0
    oracle_bins: int = 200
    output_dir: str | None = None
    model: ModelConfig = dataclass_field(default_factory=ModelConfig)
    sampler: SamplerConfig = dataclass_field(default_factory=SamplerConfig)
    estimator: EstimatorConfig = dataclass_field(default_factory=EstimatorConfig)
    objective: ObjectiveConfig = dataclass_field(default_factory=ObjectiveConfig)
    train: TrainConfig = dataclass_field(default_factory=TrainConfig)
    reward: RewardSpec = dataclass_field(default_factory=RewardSpec)

    def _expand_ref(self, raw, what: str) -> np.ndarray:
        arr = np.asarray(raw, dtype=np.float64)
        if arr.ndim == 0:
            arr = np.full((self.n_conditions, self.data_dim), float(arr))
        elif arr.ndim == 1:
            if arr.size != self.data_dim:
                raise ConfigError(f"{what} per-axis list must have length data_dim",
                                  field=what)
            arr = np.tile(arr, (self.n_conditions, 1))
        elif arr.ndim == 2:
            if arr.shape != (self.n_conditions, self.data_dim):
                raise ConfigError(
                    f"{what} table must be [n_conditions, data_dim], got {arr.shape}",
                    field=what)
        else:
            raise ConfigError(f"{what} has too many dimensions", field=what)
        return arr

    def ref_means_array(self) -> np.ndarray:
        return self._expand_ref(self.ref_means, "ref_means")

    def ref_vars_array(self) -> np.ndarray:
        arr = self._expand_ref(self.ref_vars, "ref_vars")
        if np.any(arr <= 0.0):
            raise ConfigError("reference variances must be positive", field="ref_vars")
        return arr

    def validate(self) -> None:
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer", field="seed")
        if self.data_dim not in (1, 2):
            raise ConfigError("data_dim must be 1 or 2 (grid oracles cap the dimension)",
                              field="data_dim")
        if self.n_conditions < 1:
            raise ConfigError("n_conditions must be positive", field="n_conditions")
        if self.oracle_bins < 10:
            raise ConfigError("oracle_bins must be at least 10", field="oracle_bins")
        self.ref_means_array()
        self.ref_vars_array()
        self.model.validate()
        for prefix, sub in (("sampler", self.sampler), ("estimator", self.estimator)):
            try:
                sub.validate()
            except ContractViolation as err:
                raise ConfigError(str(err), field=prefix) from err
        self.objective.validate()
        self.train.validate()
        self.reward.validate()
        if self.reward.kind == "quadratic":
            arr = np.atleast_2d(np.asarray(self.reward.means, dtype=np.float64))
            if arr.shape[1] != self.data_dim:
                raise ConfigError("reward target dimension must match data_dim",
                                  field="reward.means")
            if arr.shape[0] not in (1, self.n_conditions):
                raise ConfigError("reward needs one target row, or one per condition",
                                  field="reward.means")
        if self.reward.kind == "indicator-region":
            if len(self.reward.region_low) != self.data_dim:
                raise ConfigError("region bounds must match data_dim",
                                  field="reward.region_low")
        if self.estimator.formula == "trajectory" and (
                self.sampler.mode != SDE_EULER or self.sampler.noise_level <= 0.0):
            raise ConfigError(
                "the trajectory likelihood is the density of the stochastic chain; "
                "deterministic sampling makes its transitions degenerate "
                "(configure sampler.mode = 'sde-euler' with noise_level > 0)",
                field="estimator.formula")

    def to_dict(self) -> dict:
        return _as_plain(self)

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        return _build(ExperimentConfig, data, path="")

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as err:
            raise ConfigError(f"cannot read config file: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return ExperimentConfig.from_dict(data)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_NESTED_TYPES = {
    "model": ModelConfig,
    "sampler": SamplerConfig,
    "estimator": EstimatorConfig,
    "objective": ObjectiveConfig,
    "train": TrainConfig,
    "reward": RewardSpec,
}


def _as_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _as_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_as_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object, got {type(data).__name__}", field=path or "")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}", field=dotted)
        if key in _NESTED_TYPES and cls is ExperimentConfig:
            kwargs[key] = _build(_NESTED_TYPES[key], value, dotted)
        else:
            kwargs[key] = value
    missing = [f.name for f in dataclasses.fields(cls)
               if f.default is dataclasses.MISSING
               and f.default_factory is dataclasses.MISSING
               and f.name not in kwargs]
    if missing:
        dotted = f"{path}.{missing[0]}" if path else missing[0]
        raise ConfigError(f"missing required config field {missing[0]!r}", field=dotted)
    return cls(**kwargs)
