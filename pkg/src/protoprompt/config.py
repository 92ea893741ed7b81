"""Run configuration: nested dataclasses stored as a flat ``section.key: value`` YAML file."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig, ConfigError
from .data import SynthConfig
from .fusion import FusionConfig
from .losses import LossWeights, TransformRanges
from .metrics import Perturbation

SCHEMA_VERSION = 1


@dataclass
class OptimizerConfig:
    lr_slow: float = 2e-4  # prototypes, spatial biases, backbone weights and tokens
    lr_fast: float = 1e-2  # grouping, fusion MLPs and heads
    batch_size: int = 16
    epochs: int = 25
    decay_factor: float = 0.5
    decay_every: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr_slow <= 0 or self.lr_fast <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.decay_every < 1:
            raise ConfigError("batch_size >= 1, epochs >= 0 and decay_every >= 1 required")


@dataclass
class DataConfig:
    source: str = "synth"  # "synth" or "folder"
    synth: SynthConfig = field(default_factory=SynthConfig)
    folder_root: str = ""
    keypoint_file: str = ""

    def __post_init__(self):
        if self.source not in ("synth", "folder"):
            raise ConfigError(f"data.source must be 'synth' or 'folder', got {self.source!r}")


@dataclass
class EvalConfig:
    layer: int = -2  # prompted-layer index for consistency/stability
    perturbation: Perturbation = field(default_factory=Perturbation)
    batch_size: int = 100


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    equivariance: TransformRanges = field(default_factory=TransformRanges)
    eval: EvalConfig = field(default_factory=EvalConfig)
    mode: str = "frozen"  # "scratch" or "frozen"
    warmup_epochs: int = 3  # frozen mode: epochs before the backbone is frozen; the lr decay starts here
    warmup_objective: str = "cls"  # frozen mode: "cls" or "full" loss during warmup
    seed: int = 0
    output_dir: str = "runs/default"
    device: str = "cpu"

    def __post_init__(self):
        if self.mode not in ("scratch", "frozen"):
            raise ConfigError(f"mode must be 'scratch' or 'frozen', got {self.mode!r}")
        if self.warmup_objective not in ("cls", "full"):
            raise ConfigError(f"warmup_objective must be 'cls' or 'full', got {self.warmup_objective!r}")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be non-negative")


def to_flat(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(to_flat(value, key + "."))
        elif isinstance(value, tuple):
            out[key] = list(value)
        else:
            out[key] = value
    return out


def _nested(flat: dict) -> dict:
    tree: dict = {}
    for key, value in flat.items():
        node = tree
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config key {key!r} conflicts with a scalar")
        node[leaf] = value
    return tree


def _build(cls, tree: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in tree.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            kwargs[key] = _build(hint, value)
        else:
            kwargs[key] = _coerce(hint, value, key)
    return cls(**kwargs)


def _coerce(hint, value, key):
    origin = typing.get_origin(hint)
    if hint is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if hint is int and isinstance(value, bool):
        raise ConfigError(f"{key}: expected int, got bool")
    if hint is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if origin in (list, tuple) and not isinstance(value, (list, tuple)):
        raise ConfigError(f"{key}: expected a list, got {value!r}")
    if hint in (int, float, str, bool) and not isinstance(value, hint):
        raise ConfigError(f"{key}: expected {hint.__name__}, got {value!r}")
    return value


def from_flat(flat: dict) -> RunConfig:
    flat = dict(flat)
    version = flat.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")
    try:
        return _build(RunConfig, _nested(flat))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override must look like KEY=VALUE, got {item!r}")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    flat = to_flat(config)
    for key in overrides:
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r}")
    flat.update(overrides)
    return from_flat(flat)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    flat = {}
    if path is not None:
        flat = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(flat, dict):
            raise ConfigError(f"{path}: expected a mapping of dotted keys")
    config = from_flat(flat)
    return apply_overrides(config, overrides) if overrides else config


def dump_config(config: RunConfig) -> str:
    flat = {"schema_version": SCHEMA_VERSION} | to_flat(config)
    return yaml.safe_dump(flat, sort_keys=False)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(config))
