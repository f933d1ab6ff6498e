"""Experiment configuration: JSON-loadable, CLI-overridable."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError
from ..objectives import (
    load_discrete_candidates,
    make_powell_variant,
    make_slice_variant,
)
from ..surrogate import SURROGATE_VARIANTS

METHODS = ("rtdk", "ei", "pi", "ucb", "random")

_OBJECTIVE_RE = re.compile(r"^(\w+)\((.*)\)$")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which objective family to run, e.g. thomson_slice(16) or powell(8)."""

    family: str = "thomson_slice"
    dim: int = 16
    path: str | None = None

    def __post_init__(self):
        if self.family not in ("thomson_slice", "powell", "discrete_table"):
            raise ConfigError(f"unknown objective family {self.family!r}")
        if self.family == "discrete_table" and not self.path:
            raise ConfigError("discrete_table needs a CSV path")

    @classmethod
    def parse(cls, text: str) -> "ObjectiveSpec":
        match = _OBJECTIVE_RE.match(text.strip())
        if not match:
            raise ConfigError(f"cannot parse objective spec {text!r}")
        family, arg = match.group(1), match.group(2).strip()
        if family == "discrete_table":
            return cls(family=family, dim=0, path=arg)
        try:
            return cls(family=family, dim=int(arg))
        except ValueError:
            raise ConfigError(f"objective {family} needs an integer dimension") from None

    def label(self) -> str:
        if self.family == "discrete_table":
            return f"discrete_table({self.path})"
        return f"{self.family}({self.dim})"

    def make_variant(self, seed: int, optimum_budget: int):
        if self.family == "thomson_slice":
            return make_slice_variant(dim=self.dim, seed=seed,
                                      optimum_budget=optimum_budget)
        if self.family == "powell":
            return make_powell_variant(dim=self.dim, seed=seed,
                                       optimum_budget=optimum_budget)
        return load_discrete_candidates(self.path, seed=seed)


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one pre-train + evaluate experiment."""

    method: str = "rtdk"
    objective: ObjectiveSpec = ObjectiveSpec()
    n_pretrain_variants: int = 5
    pretrain_samples_per_variant: int = 50
    eval_budget: int = 150
    n_eval_variants: int = 5
    seeds: tuple = (0,)
    surrogate_variant: str = "transformer"
    subtrajectory_length: int = 50
    n_init: int = 5
    master_seed: int = 0
    out_dir: str = "runs/experiment"

    # architecture
    model_dim: int = 64
    num_heads: int = 4
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    feedforward_dim: int = 128
    kernel_components: int = 5
    jitter: float = 1e-6

    # training
    surrogate_lr: float = 3e-4
    surrogate_batch: int = 4
    updates_per_trajectory: int = 50
    gamma: float = 0.99
    tau: float = 0.005
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_temperature: float = 3e-4
    sac_batch: int = 64
    replay_capacity: int = 64

    # acquisition behaviour
    boltzmann_beta: float = 1.0
    num_proposals: int = 1024
    exploration_p0: float = 0.5
    epsilon_clamp: float = 1e-8
    acquisition_xi: float = 0.01
    acquisition_kappa: float = 2.0
    greedy_eval: bool = False
    online_updates: bool = False

    optimum_budget: int = 100_000
    torch_threads: int = 1
    make_plot: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.surrogate_variant not in SURROGATE_VARIANTS:
            raise ConfigError(f"unknown surrogate variant {self.surrogate_variant!r}")
        if self.n_init < 1 or self.subtrajectory_length < self.n_init:
            raise ConfigError("need subtrajectory_length >= n_init >= 1")
        if self.method == "rtdk":
            if self.eval_budget % self.subtrajectory_length != 0:
                raise ConfigError("eval_budget must be divisible by the "
                                  "sub-trajectory length")
            if self.pretrain_samples_per_variant % self.subtrajectory_length != 0:
                raise ConfigError("pretrain samples per variant must be divisible "
                                  "by the sub-trajectory length")
        if not self.seeds:
            raise ConfigError("need at least one evaluation seed")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["objective"] = self.objective.label()
        data["seeds"] = list(self.seeds)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        objective = data.get("objective", "thomson_slice(16)")
        if isinstance(objective, str):
            data["objective"] = ObjectiveSpec.parse(objective)
        elif isinstance(objective, dict):
            data["objective"] = ObjectiveSpec(**objective)
        if "seeds" in data:
            data["seeds"] = tuple(int(s) for s in data["seeds"])
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
