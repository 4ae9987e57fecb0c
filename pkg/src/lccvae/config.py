"""Run configuration: one JSON document, validated before any work starts."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .constraint import LcTrainPlan
from .cvae import CvaeConfig
from .data import SyntheticConfig
from .metrics import config_hash

__all__ = ["ConfigError", "DataSection", "ConstraintSection", "CompletionSection", "ExperimentSection",
           "AblationSection", "RunConfig", "load_config", "apply_overrides"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    path: str | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    norm_mode: str = "zscore"
    norm_pool: str = "training_pool"

    def __post_init__(self):
        if self.source not in ("synthetic", "ensb"):
            raise ConfigError(f"data.source must be 'synthetic' or 'ensb', got {self.source!r}")
        if self.source == "ensb" and not self.path:
            raise ConfigError("data.path is required when data.source is 'ensb'")
        if self.norm_mode not in ("zscore", "anomaly"):
            raise ConfigError(f"unknown data.norm_mode {self.norm_mode!r}")
        if self.norm_pool not in ("training_pool", "r_train"):
            raise ConfigError(f"unknown data.norm_pool {self.norm_pool!r}")


@dataclass(frozen=True)
class ConstraintSection:
    reference_policy: str = "first_realization"
    anchor_fraction: float = 0.05
    anchor_selection: str = "uniform_grid_stride"
    lam: float = 10.0
    d_z_max: float = 0.5

    def __post_init__(self):
        self.plan  # validates
        if self.lam < 0 or self.d_z_max <= 0:
            raise ConfigError("constraint.lam must be >= 0 and constraint.d_z_max > 0")

    @property
    def plan(self) -> LcTrainPlan:
        return LcTrainPlan(self.reference_policy, self.anchor_fraction, self.anchor_selection)


@dataclass(frozen=True)
class CompletionSection:
    k: int = 4
    mode: str = "auto"
    m: int = 64
    sparse_threshold: int = 2000
    steps: int = 200
    lr: float = 0.05
    neighbor_pool: str = "observed"
    training_pairs: str = "union"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("completion.k must be >= 1")
        if self.mode not in ("auto", "exact", "sparse_variational"):
            raise ConfigError(f"unknown completion.mode {self.mode!r}")
        if self.neighbor_pool not in ("observed", "anchors"):
            raise ConfigError(f"unknown completion.neighbor_pool {self.neighbor_pool!r}")
        if self.training_pairs not in ("union", "target_only"):
            raise ConfigError(f"unknown completion.training_pairs {self.training_pairs!r}")


@dataclass(frozen=True)
class ExperimentSection:
    r_train: int = 9
    held_out: int = -1
    alpha: float = 0.7
    policy: str = "seeded_random"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"experiment.alpha must lie in (0, 1], got {self.alpha}")
        if self.policy not in ("seeded_random", "neighbor_distance_rank"):
            raise ConfigError(f"unknown experiment.policy {self.policy!r}")
        if self.r_train < 1:
            raise ConfigError("experiment.r_train must be >= 1")


@dataclass(frozen=True)
class AblationSection:
    r_train: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8, 9)
    alphas: tuple[float, ...] = (0.3, 0.6, 0.9, 1.0)
    policies: tuple[str, ...] = ("seeded_random",)
    seeds: tuple[int, ...] = (0, 1, 2)
    record_runtime: bool = False
    spearman_threshold: float | None = None


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    cvae: CvaeConfig = field(default_factory=CvaeConfig)
    constraint: ConstraintSection = field(default_factory=ConstraintSection)
    completion: CompletionSection = field(default_factory=CompletionSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    output_dir: str = "runs/default"
    workers: int = 1

    def to_dict(self) -> dict:
        return _to_dict(self)

    @property
    def hash(self) -> str:
        # where outputs go and how many processes run do not change results
        d = self.to_dict()
        del d["output_dir"], d["workers"]
        return config_hash(d)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _from_dict(cls, doc, "")


def _to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_dict(v) for v in obj]
    return obj


def _from_dict(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        kwargs[name] = _coerce(hints[name], value, f"{where}.{name}" if where else name)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _coerce(tp, value, where):
    if dataclasses.is_dataclass(tp):
        return _from_dict(tp, value, where)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        return tuple(_coerce(args[0], v, where) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(doc)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    doc = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {p!r} in override {item!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return RunConfig.from_dict(doc)
