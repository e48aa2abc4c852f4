"""Run configuration: one YAML/JSON file, overridable from the command line.

Top-level keys (all optional)::

    seed: 0                     # master seed (scene generation, init, shuffling)
    strategy: turbotrain        # one-time | pretrain-only | turbotrain
    balance: [2000, 1000]       # free, balanced steps per cycle
    paths:    {scenes, test_scenes, out, ckpt}
    gen:      {count, index_offset}
    scenario: ScenarioConfig fields
    voxel:    VoxelSpec fields (the model's grid)
    model:    ModelConfig fields other than the grid
    pretrain: PretrainConfig fields
    train:    {epochs, batch_size, symmetric, optimizer: {lr, weight_decay, ...}}
    diagnose: {steps, batch_size}
    compare:  {strategies, seeds, n_train, n_test, test_offset, train_fraction, pretrain_full}

Unknown keys are errors, so typos do not silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .balance import BalanceSchedule, TrainConfig
from .losses import ChamferConfig, OccFocalConfig
from .model import ModelConfig
from .optim import OptimizerConfig
from .pipeline import STRATEGIES, check_strategy
from .pretrain import PretrainConfig
from .scene import ScenarioConfig
from .voxel import VoxelSpec


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    scenes: str = "scenes"
    test_scenes: str | None = None
    out: str = "runs"
    ckpt: str | None = None


@dataclass
class GenSettings:
    count: int = 8
    index_offset: int = 0  # scene i uses derive_seed(seed, index_offset + i)


@dataclass
class DiagnoseSettings:
    steps: int = 10
    batch_size: int = 4


@dataclass
class CompareSettings:
    strategies: tuple[str, ...] = STRATEGIES
    seeds: tuple[int, ...] = (0, 1, 2)
    n_train: int = 64
    n_test: int = 16
    test_offset: int = 1000
    train_fraction: float = 1.0  # fine-tune on the first ceil(fraction * n_train) scenes
    pretrain_full: bool = True  # pretrain on all n_train scenes even when training on a subset


@dataclass
class RunConfig:
    seed: int = 0
    strategy: str = "turbotrain"
    balance: tuple[int, int] = (2000, 1000)
    paths: Paths = field(default_factory=Paths)
    gen: GenSettings = field(default_factory=GenSettings)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    voxel: VoxelSpec = field(default_factory=lambda: ModelConfig().spec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    diagnose: DiagnoseSettings = field(default_factory=DiagnoseSettings)
    compare: CompareSettings = field(default_factory=CompareSettings)

    def validate(self) -> None:
        check_strategy(self.strategy)
        BalanceSchedule(*self.balance)
        self.scenario.validate()
        self.pretrain.validate()
        self.train.validate()
        for s in self.compare.strategies:
            check_strategy(s)
        if len(self.compare.strategies) < 2:
            raise ConfigError("compare needs at least two strategies")
        if not self.compare.seeds:
            raise ConfigError("compare needs at least one seed")
        if self.gen.count < 0 or self.compare.n_train < 1 or self.compare.n_test < 1:
            raise ConfigError("scene counts must be positive (gen.count may be 0)")
        if not 0.0 < self.compare.train_fraction <= 1.0:
            raise ConfigError(f"compare.train_fraction {self.compare.train_fraction} outside (0, 1]")
        if self.diagnose.steps < 1 or self.diagnose.batch_size < 1:
            raise ConfigError("diagnose.steps and diagnose.batch_size must be >= 1")
        if self.scenario.t_hist != self.model.t_frames or self.scenario.t_fut != self.model.t_fut:
            raise ConfigError(
                f"scenario frames/horizon ({self.scenario.t_hist}, {self.scenario.t_fut}) differ from the model's "
                f"({self.model.t_frames}, {self.model.t_fut})")

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, spec=self.voxel)

    def pretrain_config(self, seed: int | None = None) -> PretrainConfig:
        return dataclasses.replace(self.pretrain, seed=self.seed if seed is None else seed)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        """Training settings with the configured schedule; strategy logic lives in the pipeline."""
        return dataclasses.replace(self.train, balance=tuple(self.balance),
                                   seed=self.seed if seed is None else seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"].pop("spec", None)  # the grid lives under "voxel"
        d["train"].pop("balance", None)
        d["train"].pop("seed", None)
        d["pretrain"].pop("seed", None)
        return _plain(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


_NESTED = frozenset({
    RunConfig, Paths, GenSettings, DiagnoseSettings, CompareSettings, ScenarioConfig, VoxelSpec,
    ModelConfig, PretrainConfig, TrainConfig, OptimizerConfig, ChamferConfig, OccFocalConfig,
})


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if tp in _NESTED:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}")
        return build(tp, value, where)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot (1e-8) as strings
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{where}: expected a finite number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def build(cls, data: dict, where: str = ""):
    """Instantiate dataclass ``cls`` from a (partial) mapping, defaults elsewhere."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (YAML or JSON), apply flat CLI ``overrides`` and validate."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        data = loaded
    if "model" in data and isinstance(data["model"], dict) and "spec" in data["model"]:
        raise ConfigError("model.spec is not a config key; put the grid under 'voxel'")
    for section, key in (("train", "balance"), ("train", "seed"), ("pretrain", "seed")):
        if isinstance(data.get(section), dict) and key in data[section]:
            raise ConfigError(f"{section}.{key} is set at the top level ('{key}:'), not per section")
    if isinstance(data.get("voxel"), dict):
        # partial grids start from the model's grid, not the full-range defaults
        base = dataclasses.asdict(ModelConfig().spec)
        data = {**data, "voxel": {**base, **data["voxel"]}}
    cfg = build(RunConfig, data)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in {f.name for f in dataclasses.fields(Paths)}:
            setattr(cfg.paths, key, str(value))
        elif key == "seed":
            cfg.seed = int(value)
        elif key == "strategy":
            cfg.strategy = value
        elif key == "balance":
            cfg.balance = tuple(value)
        elif key == "count":
            cfg.gen.count = int(value)
        else:
            raise ConfigError(f"unsupported override {key!r}")
    try:
        cfg.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
