"""Run configuration document (YAML) with strict keys, presets and flag overrides."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import yaml

from .closedloop import PosteriorConfig
from .encoder import EncoderConfig
from .metrics import DEFAULT_WEIGHTS
from .mixture import MixtureConfig
from .synth import WorldConfig


class ConfigError(ValueError):
    pass


@dataclass
class AnchorSettings:
    k: int = 64
    horizon: float = 8.0


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 8
    data_mode: str = "open_loop"
    base_lr: float = 2e-3
    weight_decay: float = 1e-4
    max_steps: int | None = None
    refit_steps: int = 0
    refit_T_zstar: float = 0.5


@dataclass
class RolloutSettings:
    num_rollouts: int = 32
    duration: float = 8.0
    debug: bool = False


@dataclass
class DataSettings:
    count: int = 64


@dataclass
class MetricSettings:
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    data: DataSettings = field(default_factory=DataSettings)
    world: dict = field(default_factory=lambda: WorldConfig().to_dict())
    anchors: AnchorSettings = field(default_factory=AnchorSettings)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    posterior: PosteriorConfig = field(default_factory=PosteriorConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    rollout: RolloutSettings = field(default_factory=RolloutSettings)
    metrics: MetricSettings = field(default_factory=MetricSettings)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)


PRESETS = {
    "discrete": {
        "mixture": {"paradigm": "anchor_based", "continuous_regression": False, "K": 2048,
                    "T_pred": 0.5, "T_zstar": 0.5},
        "posterior": {"T_post": 0.5, "execution_threshold": math.inf, "approximate": True},
        "train": {"data_mode": "closed_loop"},
        "anchors": {"k": 2048},
    },
    "anchor-free": {
        "mixture": {"paradigm": "anchor_free", "continuous_regression": True, "K": 6, "T_pred": 4.0, "T_zstar": 4.0},
        "posterior": {"T_post": 0.5, "execution_threshold": 1.0, "approximate": False},
        "train": {"data_mode": "closed_loop"},
    },
    "anchor-based-0.5s": {
        "mixture": {"paradigm": "anchor_based", "continuous_regression": True, "K": 2048,
                    "T_pred": 0.5, "T_zstar": 0.5},
        "posterior": {"T_post": 0.5, "execution_threshold": 1.0, "approximate": True},
        "train": {"data_mode": "closed_loop"},
        "anchors": {"k": 2048},
    },
    "anchor-based-4s": {
        "mixture": {"paradigm": "anchor_based", "continuous_regression": True, "K": 2048,
                    "T_pred": 4.0, "T_zstar": 0.5},
        "posterior": {"T_post": 0.5, "execution_threshold": 1.0, "approximate": True},
        "train": {"data_mode": "closed_loop"},
        "anchors": {"k": 2048},
    },
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    extra = sorted(set(data) - set(known))
    if extra:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(extra)}")
    kw = {}
    defaults = cls()
    for name, value in data.items():
        cur = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if is_dataclass(cur):
            kw[name] = _build(type(cur), value, path)
        elif name == "world":
            try:
                kw[name] = WorldConfig.from_dict({**cur, **value}).to_dict()
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{path}: {e}") from e
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def parse(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"not a valid config document: {e}") from e
    return from_dict(data or {})


def _deep_update(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        out[k] = _deep_update(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def apply(cfg: RunConfig, overrides: dict) -> RunConfig:
    """New config with nested ``overrides`` applied (validated like a document)."""
    return from_dict(_deep_update(cfg.to_dict(), overrides))


def with_preset(cfg: RunConfig, name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return apply(cfg, PRESETS[name])
