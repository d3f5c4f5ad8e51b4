"""Experiment configuration: one nested key-value file drives every command.

The YAML layout mirrors the dataclasses:

    dataset: {num_sequences: 2000, context: 5, horizon: 10, ...}
    nets:    {content_dim: 128, pose_dim: 5, base_channels: 64, ...}
    loss:    {alpha: 1.0, beta: 0.0001, max_offset: null, ...}
    train:   {lr: 0.002, beta1: 0.5, batch_size: 32, ...}

Command-line flags override file values; unknown keys are rejected with the
offending section and key named.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .nets import NetConfig
from .objectives import LossWeights
from .synthvid import DatasetConfig

BASELINES = ("mipae", "drnet", "none")
DEVICE_ENV_VAR = "FACTORVID_DEVICE"


@dataclass(frozen=True)
class TrainConfig:
    """Everything the trainer needs, including the sub-configs it passes on."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    nets: NetConfig = field(default_factory=NetConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    lr: float = 0.002
    beta1: float = 0.5
    batch_size: int = 32
    steps_phase1: int = 20000
    steps_phase2: int = 5000
    seed: int = 0
    checkpoint_interval: int = 1000
    critic_steps: int = 1
    val_fraction: float = 0.05
    baseline: str = "mipae"
    device: str = "cpu"

    def validate(self) -> "TrainConfig":
        self.dataset.validate()
        self.nets.validate()
        self.loss.validate(clip_len=self.dataset.clip_len)
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0.0 <= self.beta1 < 1.0):
            raise ConfigError("beta1 must be in [0, 1)")
        for name in ("batch_size", "steps_phase1", "steps_phase2",
                     "checkpoint_interval", "critic_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (0.0 <= self.val_fraction < 0.5):
            raise ConfigError("val_fraction must be in [0, 0.5)")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}")
        if self.nets.frame_size != self.dataset.frame_size:
            raise ConfigError("nets.frame_size must match dataset.frame_size")
        return self

    def resolved_device(self) -> str:
        return os.environ.get(DEVICE_ENV_VAR, self.device)


_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "nets": NetConfig,
    "loss": LossWeights,
}
_TUPLE_FIELDS = {"speed_range"}


def _build_section(cls, values: dict, section: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key!r} in config")
        if key in _TUPLE_FIELDS and isinstance(value, (list, tuple)):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in section {section!r}: {exc}") from exc


def train_config_from_dict(data: dict) -> TrainConfig:
    data = dict(data or {})
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        sections[name] = _build_section(cls, data.pop(name, {}) or {}, name)
    train_values = data.pop("train", {}) or {}
    if data:
        raise ConfigError(f"unknown config section(s): {sorted(data)}")
    cfg = _build_section(TrainConfig, {**sections, **train_values}, "train")
    return cfg.validate()


def train_config_to_dict(cfg: TrainConfig) -> dict:
    out = {name: dataclasses.asdict(getattr(cfg, name))
           for name in _SECTION_TYPES}
    out["dataset"]["speed_range"] = list(out["dataset"]["speed_range"])
    train = dataclasses.asdict(cfg)
    for name in _SECTION_TYPES:
        train.pop(name)
    out["train"] = train
    return out


def load_train_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Read the config file (if any) and apply nested overrides.

    ``overrides`` maps section name to {key: value}; None values are skipped
    so unset CLI flags pass through.
    """
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        data = loaded
    for section, values in (overrides or {}).items():
        live = {k: v for k, v in values.items() if v is not None}
        if not live:
            continue
        data.setdefault(section, {})
        if data[section] is None:
            data[section] = {}
        data[section].update(live)
    return train_config_from_dict(data)


def save_train_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(train_config_to_dict(cfg), fh, sort_keys=False)
