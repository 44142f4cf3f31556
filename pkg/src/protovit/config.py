"""Run configuration: defaults, then an INI-style file, then command-line flags.

Config files are plain ``key = value`` lines under section headers; section names
are only for readability and any key may appear in any section::

    [model]
    preset = micro

    [train]
    episodes = 300
    lr = 1e-4

A ``run.json`` written by ``train`` is also accepted; its ``config`` object is used.
"""

from __future__ import annotations

import configparser
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from .data import AugmentConfig
from .sampler import DEFAULT_SEED, EpisodeSpec
from .trainer import TrainConfig
from .vit import PRESETS, ViTConfig

SEED_ENV = "PROTOVIT_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "small"
    precision: int = 32
    episodes: int = 1000
    ways: int = 5
    shots: int = 5
    queries: int = 15
    eval_freq: int = 10
    val_episodes: int = 50
    eval_episodes: int = 100
    clip_max_norm: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    optimizer: str = "decoupled"
    distance: str = "squared"
    meta_batch: int = 1
    # 0 means "use the preset's image size"
    target_size: int = 0
    hflip_prob: float = 0.5
    max_rotation_degrees: float = 10.0
    normalize_mean: str = "0.5,0.5,0.5"
    normalize_std: str = "0.5,0.5,0.5"
    data: str = ""
    train_split: str = "train"
    val_split: str = ""
    eval_split: str = "test"
    seed: int = DEFAULT_SEED
    workers: int = 1

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.optimizer not in ("decoupled", "coupled"):
            raise ConfigError(f"optimizer must be decoupled or coupled, got {self.optimizer!r}")
        if self.distance not in ("squared", "unsquared"):
            raise ConfigError(f"distance must be squared or unsquared, got {self.distance!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    # -- derived objects --------------------------------------------------
    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def vit_config(self) -> ViTConfig:
        return ViTConfig.preset(self.preset)

    def spec(self) -> EpisodeSpec:
        try:
            return EpisodeSpec(self.ways, self.shots, self.queries)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def augment(self, image_size: Optional[int] = None) -> AugmentConfig:
        """Augmentation settings; a zero ``target_size`` falls back to ``image_size``
        (or the preset's image size)."""
        try:
            return AugmentConfig(
                target_size=self.target_size or image_size or self.vit_config().image_size,
                hflip_prob=self.hflip_prob,
                max_rotation_degrees=self.max_rotation_degrees,
                normalize_mean=_floats(self.normalize_mean, "normalize_mean"),
                normalize_std=_floats(self.normalize_std, "normalize_std"),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                episodes=self.episodes, spec=self.spec(), eval_freq=self.eval_freq,
                val_episodes=self.val_episodes, clip_max_norm=self.clip_max_norm, seed=self.seed,
                lr=self.lr, weight_decay=self.weight_decay, decoupled=self.optimizer == "decoupled",
                distance=self.distance, meta_batch=self.meta_batch, augment=self.augment())
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TYPES = {"int": int, "float": float, "str": str}


def _floats(text: str, key: str) -> tuple:
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise ConfigError(f"{key} must be comma-separated numbers, got {text!r}") from None


def _coerce(key: str, value: Any) -> Any:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[_FIELDS[key].type] if isinstance(_FIELDS[key].type, str) else _FIELDS[key].type
    if isinstance(value, kind) and not isinstance(value, bool):
        return value
    try:
        if kind is int:
            return int(str(value).strip())
        if kind is float:
            return float(str(value).strip())
        return str(value).strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".json":
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        raw = raw.get("config", raw)
        return {k: _coerce(k, v) for k, v in raw.items()}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            key = key.replace("-", "_")
            values[key] = _coerce(key, value)
    return values


def resolve(file_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
            env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Defaults < config file < ``PROTOVIT_SEED`` (seed only, when not set otherwise) < flags."""
    env = os.environ if env is None else env
    values: dict = {}
    if file_path:
        values.update(read_config_file(file_path))
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "seed" not in values and "seed" not in overrides and env.get(SEED_ENV):
        values["seed"] = _coerce("seed", env[SEED_ENV])
    for key, value in overrides.items():
        values[key] = _coerce(key, value)
    return RunConfig(**values)
