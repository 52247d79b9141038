"""Run configuration: one YAML document, schema-checked against dataclasses.

Unknown keys are rejected at every nesting level.  The commented reference
document with every default is ``default_config.yaml`` next to this module
(``safenav config`` prints it).
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import yaml

from .env import IntersectionEnv
from .geometry import EGO_TASKS, MapSpec
from .safety import ConstraintConfig
from .td3 import TrainConfig
from .world import EgoLimits, TrafficConfig

TASK_CHOICES = EGO_TASKS + ("multi",)


class ConfigError(ValueError):
    pass


@dataclass
class SimSection:
    t0: float = 0.1            # simulation step (s)
    t_max: float = 60.0        # episode time limit (s)
    limits: EgoLimits = field(default_factory=EgoLimits)
    density: float = 1.0       # multiplies every spawn rate

    def __post_init__(self):
        if self.t0 <= 0 or self.t_max <= 0 or self.density < 0:
            raise ConfigError("t0, t_max must be > 0 and density >= 0")


@dataclass
class SafetySection:
    dataset_size: int = 200_000
    epochs: int = 20
    lr: float = 1e-3
    lr_decay: float = 1.0
    batch_size: int = 256
    hidden: tuple = (256, 256, 256)
    active_only: bool = True          # keep only samples with TTC below activation_ttc
    correction_space: str = "raw"     # "raw" (a+, a-) or "speed" (scalar a+ - a-)
    dataset_format: str = "binary"    # "binary" or "csv"

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.correction_space not in ("raw", "speed"):
            raise ConfigError(f"correction_space must be raw|speed, got {self.correction_space!r}")
        if self.dataset_format not in ("binary", "csv"):
            raise ConfigError(f"dataset_format must be binary|csv, got {self.dataset_format!r}")


@dataclass
class EvalSection:
    episodes: int = 1000
    seed: int = 12345
    policy: str = "actor"             # "actor", "random" or "idm"

    def __post_init__(self):
        if self.policy not in ("actor", "random", "idm"):
            raise ConfigError(f"eval.policy must be actor|random|idm, got {self.policy!r}")


ALL_CELLS = ("TD3", "TD3+Attention", "TD3+Safety", "TD3+Safety+Attention", "pre-trained+Safety")


@dataclass
class AblationSection:
    safety: bool = False              # safety layer during training and evaluation
    attention: bool = True            # attention actor instead of the flat MLP
    pretrained_safety: bool = False   # attach the safety layer at evaluation only
    cells: tuple = ALL_CELLS

    def __post_init__(self):
        self.cells = tuple(self.cells)
        bad = [c for c in self.cells if c not in ALL_CELLS]
        if bad:
            raise ConfigError(f"unknown ablation cells {bad}")


# train-section keys owned by other parts of the run config
_TRAIN_DERIVED = ("seed", "safety", "attention", "tasks")


@dataclass
class RunConfig:
    name: str = "default"
    seed: int = 0
    task: str = "left"                # left | straight | right | multi
    map: MapSpec = field(default_factory=MapSpec)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    sim: SimSection = field(default_factory=SimSection)
    constraint: ConstraintConfig = field(default_factory=ConstraintConfig)
    safety: SafetySection = field(default_factory=SafetySection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def __post_init__(self):
        if self.task not in TASK_CHOICES:
            raise ConfigError(f"task must be one of {TASK_CHOICES}, got {self.task!r}")
        if abs(self.constraint.t0 - self.sim.t0) > 1e-12:
            raise ConfigError("constraint.t0 must equal sim.t0")

    @property
    def tasks(self) -> tuple:
        return EGO_TASKS if self.task == "multi" else (self.task,)

    @property
    def multitask(self) -> bool:
        return self.task == "multi"

    def traffic_config(self) -> TrafficConfig:
        k = self.sim.density
        return replace(self.traffic, spawn_rate={a: r * k for a, r in self.traffic.spawn_rate.items()})

    def make_env(self, seed: int) -> IntersectionEnv:
        return IntersectionEnv(self.map, self.traffic_config(), self.sim.t0, self.sim.t_max,
                               self.sim.limits, seed=seed)

    def train_config(self, safety: bool | None = None, attention: bool | None = None) -> TrainConfig:
        return replace(self.train, seed=self.seed, tasks=self.tasks,
                       safety=self.ablation.safety if safety is None else safety,
                       attention=self.ablation.attention if attention is None else attention)

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict | None) -> RunConfig:
        return _build(cls, data or {}, "")

    @classmethod
    def from_yaml(cls, text: str) -> RunConfig:
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML: {e}") from e
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config document must be a mapping")
        return cls.from_dict(data)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    return RunConfig.from_yaml(p.read_text())


def default_config_text() -> str:
    return resources.files("safenav").joinpath("default_config.yaml").read_text()


def _init_fields(cls):
    return [f for f in dataclasses.fields(cls) if f.init]


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in _init_fields(type(obj)):
            if type(obj) is TrainConfig and f.name in _TRAIN_DERIVED:
                continue
            out[f.name] = _to_plain(getattr(obj, f.name))
        return out
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _coerce(hint, value, where: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(hint, value, where + ".")
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if hint is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if hint is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return {str(k): float(v) for k, v in value.items()}
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in _init_fields(cls)}
    if cls is TrainConfig:
        allowed -= set(_TRAIN_DERIVED)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(prefix + k for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, prefix + k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {e}") from e

