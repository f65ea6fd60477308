"""Run configuration: a single JSON file with data/net/train/eval sections.

Every key is validated against the corresponding dataclass; an unknown key
is reported with its full dotted path so typos never silently fall back to
defaults. The fully resolved configuration (defaults filled in) is echoed
next to any command output.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from . import nets, toydata, training
from .losses import LossWeights, TripletConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration content (usage error, exit code 2)."""


@dataclass
class EvalConfig:
    ranks: tuple = (1, 5, 10)

    def __post_init__(self):
        if not self.ranks or any(r < 1 for r in self.ranks):
            raise ValueError(f"ranks must be positive, got {self.ranks}")


@dataclass
class RunConfig:
    data: toydata.DataConfig = field(default_factory=toydata.DataConfig)
    net: nets.NetConfig = field(default_factory=nets.NetConfig)
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_NESTED = {"weights": LossWeights, "triplet": TripletConfig}

_TUPLE_KEYS = {"syn_beta", "syn_airlight", "real_beta",
               "real_airlight_bias", "real_color_gain", "stages", "ranks"}


def _build_section(cls, values, path):
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected an object, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if cls is training.TrainConfig and key == "margin":
            # convenience spelling for the triplet margin
            key, val = "triplet", {"margin": val}
            val = _build_section(TripletConfig, val, f"{path}.margin")
            kwargs[key] = val
            continue
        if key not in known:
            raise ConfigError(f"unknown key {path}.{key}")
        if key in _NESTED and isinstance(val, dict):
            val = _build_section(_NESTED[key], val, f"{path}.{key}")
        elif key in _TUPLE_KEYS and isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_SECTIONS = {"data": toydata.DataConfig, "net": nets.NetConfig,
             "train": training.TrainConfig, "eval": EvalConfig}


def from_dict(raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"top level must be an object, got {type(raw).__name__}")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]}")
    built = {}
    for name, cls in _SECTIONS.items():
        built[name] = _build_section(cls, raw.get(name, {}), name)
    cfg = RunConfig(**built)
    if cfg.net.image_size != cfg.data.image_size:
        raise ConfigError(
            f"net.image_size ({cfg.net.image_size}) must match "
            f"data.image_size ({cfg.data.image_size})")
    return cfg


def load(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return from_dict(raw)


def to_dict(cfg):
    def convert(obj):
        if is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        return obj
    return {name: convert(getattr(cfg, name)) for name in _SECTIONS}


def write_resolved(cfg, out_dir, name="config.resolved.json"):
    """Echo the fully materialized configuration next to the outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(cfg), fh, indent=2)
        fh.write("\n")
    return path
