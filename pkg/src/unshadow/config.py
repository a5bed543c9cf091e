"""Pipeline configuration: one YAML document, ``section.key=value`` overrides."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augmentation import AugmentationConfig
from .training import NetworkConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class DatasetConfig:
    root: str = ""
    layout: str = "istd"
    split: str = "train"
    test_split: str = "test"
    require_gt: bool = False


@dataclass
class EvalConfig:
    resize: int = 256
    aggregation: str = "sample"
    literal_rmse: bool = False

    def __post_init__(self):
        if self.aggregation not in ("sample", "pixel"):
            raise ValueError("aggregation must be 'sample' or 'pixel'")
        if self.resize < 1:
            raise ValueError("resize must be positive")


@dataclass
class PathsConfig:
    checkpoint_dir: str = "runs/checkpoints"
    perceptual_weights: str = ""
    log_dir: str = "runs/logs"
    allow_untrained_perceptual: bool = False


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def _coerce(tp, value, key):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return build_dataclass(tp, value, key)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, (str, int, float)) or isinstance(value, bool):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return str(value)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        args = typing.get_args(tp)
        return tuple(_coerce(args[0], v, f"{key}[{i}]") for i, v in enumerate(value))
    if origin is dict or tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected a mapping, got {value!r}")
        return dict(value)
    return value


def build_dataclass(cls, data, key: str = ""):
    """Recursively build ``cls`` from a mapping, naming the bad key on failure."""
    if data is None:
        data = {}
    if dataclasses.is_dataclass(data):
        return data
    if not isinstance(data, dict):
        raise ConfigError(key or cls.__name__, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        path = f"{key}.{k}" if key else k
        if k not in names:
            raise ConfigError(path, "unknown key")
        kwargs[k] = _coerce(hints[k], v, path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(key or cls.__name__, str(exc)) from exc


def apply_overrides(data: dict, overrides) -> dict:
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        path, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = data
        parts = path.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(path, "cannot override inside a scalar")
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=(), check_paths: bool = True) -> PipelineConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config file must hold a mapping")
    data = apply_overrides(data, overrides)
    cfg = build_dataclass(PipelineConfig, data)
    if check_paths:
        validate_paths(cfg)
    return cfg


def validate_paths(cfg: PipelineConfig) -> None:
    if not cfg.dataset.root:
        raise ConfigError("dataset.root", "no dataset root configured")
    if not Path(cfg.dataset.root).is_dir():
        raise ConfigError("dataset.root", f"{cfg.dataset.root} does not exist")
    if cfg.dataset.layout.lower() not in ("istd", "istd+", "srd"):
        raise ConfigError("dataset.layout", f"unknown layout {cfg.dataset.layout!r}")


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: PipelineConfig, path) -> None:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x

    Path(path).write_text(yaml.safe_dump(plain(to_dict(cfg)), sort_keys=False))
