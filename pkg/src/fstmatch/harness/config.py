"""Experiment configuration: nested dataclasses read from / written to JSON.

Every key in a config file must name a field; anything else is an error, so
a misspelt key fails loudly instead of silently falling back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..fstnet import LossWeights
from ..nets import TrainConfig
from ..synthworld import WorldConfig


class ConfigError(ValueError):
    pass


def _detector_training() -> TrainConfig:
    return TrainConfig(learning_rate=1e-3, epochs=30, batch_size=32, seed=0, weight_decay=1e-2)


@dataclass
class ShapleyConfig:
    samples: int = 100
    attr_images: int = 24
    top_fraction: float = 0.3
    instability_samples: list[int] = field(default_factory=lambda: [10, 30, 100])
    instability_images: int = 50


@dataclass
class PairingConfig:
    n_pair_identities: int = 8
    real_ratio: float = 1.0


@dataclass
class FstConfig:
    c_s: int = 32
    c_t: int = 32
    hidden: int = 64
    head_hidden: int = 64
    fakes_only: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=_detector_training)


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=_detector_training)
    encoder_hidden: int = 64
    shapley: ShapleyConfig = field(default_factory=ShapleyConfig)
    pairing: PairingConfig = field(default_factory=PairingConfig)
    fst: FstConfig = field(default_factory=FstConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def for_seed(self, seed: int) -> "ExperimentConfig":
        """Copy whose world and training streams are keyed by ``seed``."""
        cfg = from_dict(self.to_dict())
        cfg.world.seed = seed
        cfg.train.seed = seed
        cfg.fst.train.seed = seed
        cfg.seeds = [seed]
        return cfg


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a table, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{path}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
