"""Run configuration: nested dataclasses with YAML round-tripping.

Every field has a default, so an empty file reproduces the default
experiment. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .crane import CraneGeometry, CraneModel, default_actuators
from .curriculum import CurriculumConfig
from .env import EnvConfig
from .learner import PPOConfig
from .world import ConfigurationError, PerturbationConfig

MODES = ("plain", "energy")
MODE_ALIASES = {"energy_optimized": "energy", "energy-optimized": "energy"}


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 1000
    seed_offset: int = 1_000_000
    # lesson index used for evaluation; -1 is the final (target) lesson
    lesson: int = -1
    record_trajectories: int = 5


@dataclass(frozen=True)
class RunConfig:
    mode: str = "energy"
    seed: int = 0
    budget: int = 35_000_000
    out_dir: str = "runs/default"
    geometry: CraneGeometry = field(default_factory=CraneGeometry)
    actuators: tuple = field(default_factory=default_actuators)
    pendulum_damping: float = 0.5
    env: EnvConfig = field(default_factory=EnvConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        mode = MODE_ALIASES.get(self.mode, self.mode)
        if mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if self.env.reward.mode != mode:
            object.__setattr__(self, "env", replace(self.env, reward=replace(self.env.reward, mode=mode)))
        if self.budget < 0:
            raise ConfigurationError("budget must be >= 0")

    def crane(self) -> CraneModel:
        return CraneModel(self.geometry, self.actuators, self.pendulum_damping)


def _default_of(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            out[f.name] = to_dict(getattr(obj, f.name))
        return out
    if isinstance(obj, (tuple, list)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, float):
        return float(obj)
    return obj


def _coerce(template, value, path: str):
    if dataclasses.is_dataclass(template):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{path}: expected a mapping")
        return from_dict(type(template), value, path)
    if isinstance(template, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list")
        if template and dataclasses.is_dataclass(template[0]):
            return tuple(from_dict(type(template[0]), v, f"{path}[{i}]") for i, v in enumerate(value))
        return tuple(_scalar(template[0] if template else None, v, f"{path}[{i}]")
                     for i, v in enumerate(value))
    return _scalar(template, value, path)


def _scalar(template, value, path: str):
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false")
        return value
    if isinstance(template, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigurationError(f"{path}: expected an integer")
        return int(value)
    if isinstance(template, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number")
        return float(value)
    if isinstance(template, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string")
        return value
    return value


def from_dict(cls, data: dict | None, path: str = ""):
    data = dict(data or {})
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = path or "top level"
        raise ConfigurationError(f"unknown configuration key(s) at {where}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        kwargs[name] = _coerce(_default_of(f), value, f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path or 'config'}: {exc}") from exc


def config_to_dict(cfg: RunConfig) -> dict:
    d = to_dict(cfg)
    # reward mode mirrors the top-level mode and is not written separately
    d["env"]["reward"].pop("mode", None)
    return d


def config_from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    env = data.get("env")
    if isinstance(env, dict) and isinstance(env.get("reward"), dict) and "mode" in env["reward"]:
        raise ConfigurationError("env.reward.mode is set through the top-level 'mode' key")
    return from_dict(RunConfig, data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def parse_config(text: str) -> RunConfig:
    data = yaml.safe_load(text)
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError("configuration file must hold a mapping")
    return config_from_dict(data)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())
