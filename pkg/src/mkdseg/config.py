"""Run configuration files: YAML documents with explicit, typo-checked keys."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .core import AugConfig, ConfigError, TrainConfig
from .model import ArchConfig

PRECISIONS = ("float32", "float64")
BRANCHES = ("student1", "student2", "teacher1", "teacher2")


@dataclass(frozen=True)
class DataConfig:
    train_dir: str = "data/train"
    val_dir: Optional[str] = None
    manifest: Optional[str] = None
    denominator: int = 8
    split_seed: int = 0

    def __post_init__(self):
        if self.denominator < 1:
            raise ConfigError("denominator", "must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"
    checkpoint_every: int = 0
    eval_every: int = 0
    precision: str = "float32"
    eval_branch: str = "student1"

    def __post_init__(self):
        if self.arch.num_classes != self.train.num_classes:
            raise ConfigError("arch.num_classes",
                              f"{self.arch.num_classes} != train.num_classes {self.train.num_classes}")
        if self.precision not in PRECISIONS:
            raise ConfigError("precision", f"must be one of {PRECISIONS}")
        if self.eval_branch not in BRANCHES:
            raise ConfigError("eval_branch", f"must be one of {BRANCHES}")
        for name in ("checkpoint_every", "eval_every"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.train.crop[0] % 8 or self.train.crop[1] % 8:
            raise ConfigError("train.crop", "crop sides must be multiples of 8")


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}{unknown[0]}", "unknown key")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{path}{key}.")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if path and not exc.field.startswith(path):
            raise ConfigError(f"{path}{exc.field}", str(exc).split(": ", 1)[-1]) from None
        raise
    except TypeError as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def load_config(path) -> RunConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))


def config_hash(cfg: RunConfig) -> str:
    core = {"train": _plain(cfg.train), "arch": _plain(cfg.arch), "precision": cfg.precision}
    return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()[:16]


__all__ = ["AugConfig", "ArchConfig", "DataConfig", "RunConfig", "TrainConfig",
           "config_from_dict", "config_hash", "config_to_dict", "dump_config",
           "load_config", "save_config"]
