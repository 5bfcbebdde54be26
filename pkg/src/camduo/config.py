"""Structured run configuration loaded from YAML, with unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import yaml

from .mam import MamConfig
from .rcm import RcmConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    n_train: int = 480
    n_val: int = 40
    image_size: int = 64


@dataclass
class EvalConfig:
    threshold: float = 0.20
    thresholds: Sequence[float] = field(
        default_factory=lambda: [round(0.05 * i, 2) for i in range(1, 13)]
    )
    scales: Sequence[float] = field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0])


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(crop=48))
    eval: EvalConfig = field(default_factory=EvalConfig)


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path or '<root>'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {sorted(unknown)} in section {path or '<root>'}"
        )
    kwargs = {}
    nested = {"dataset": DatasetConfig, "train": TrainConfig, "eval": EvalConfig,
              "rcm": RcmConfig, "mam": MamConfig}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        if name in nested and isinstance(value, dict):
            kwargs[name] = _build(nested[name], value, sub)
        elif name == "resize_range":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section {path or '<root>'}: {exc}") from None


def load_run_config(path: str, overrides: Optional[dict] = None) -> RunConfig:
    """Parse a YAML run config; `overrides` (seed/out_dir/mode) win over the file."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    cfg = _build(RunConfig, data, "")
    return apply_overrides(cfg, overrides or {})


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    if overrides.get("seed") is not None:
        cfg = dataclasses.replace(cfg, seed=overrides["seed"])
        cfg.train = dataclasses.replace(cfg.train, seed=overrides["seed"])
    else:
        cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    if overrides.get("out_dir") is not None:
        cfg = dataclasses.replace(cfg, out_dir=overrides["out_dir"])
    if overrides.get("mode") is not None:
        cfg.train = dataclasses.replace(cfg.train, mode=overrides["mode"])
    return cfg


def default_run_config(seed: int = 0, out_dir: str = "runs/default") -> RunConfig:
    cfg = RunConfig(seed=seed, out_dir=out_dir)
    cfg.train = dataclasses.replace(cfg.train, seed=seed)
    return cfg
