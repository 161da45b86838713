"""Experiment configuration: JSON presets shipped with the package, plus overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .attack import AttackConfig
from .defense import DefenseConfig
from .scene import Dataset, default_scene, load_dataset, make_dataset, pose_ring
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _preset_text(name: str) -> str:
    try:
        return resources.files("splitfield.presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}") from exc


def preset_names() -> list[str]:
    files = resources.files("splitfield.presets").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".json") and p.name != "defenses.json")


def defense_preset(name: str) -> DefenseConfig:
    table = json.loads(_preset_text("defenses"))
    if name not in table:
        raise ConfigError(f"unknown defense preset {name!r}; available: {', '.join(sorted(table))}")
    return DefenseConfig.from_dict(table[name])


def deep_update(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class DatasetSpec:
    scene: str = "default"
    path: str | None = None
    width: int = 64
    height: int = 64
    n_images: int = 20

    def __post_init__(self):
        if min(self.width, self.height, self.n_images) < 1:
            raise ConfigError("dataset sizes must be positive")
        if self.scene != "default":
            raise ConfigError(f"unknown scene {self.scene!r}")

    def build(self) -> Dataset:
        if self.path:
            if not Path(self.path).exists():
                raise ConfigError(f"dataset path {self.path} does not exist")
            return load_dataset(self.path)
        return make_dataset(default_scene(), pose_ring(self.n_images), self.width, self.height)


@dataclass
class EvalSpec:
    stride: int = 4
    n_samples: int = 32


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    output: str = "runs/out"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"dataset", "train", "attack", "eval", "output"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                dataset=DatasetSpec(**d.get("dataset", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                attack=AttackConfig.from_dict(d.get("attack", {})),
                eval=EvalSpec(**d.get("eval", {})),
                output=d.get("output", "runs/out"),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "dataset": dict(self.dataset.__dict__),
            "train": self.train.to_dict(),
            "attack": self.attack.to_dict(),
            "eval": dict(self.eval.__dict__),
            "output": self.output,
        }


def preset_dict(name: str) -> dict:
    return json.loads(_preset_text(name))


def load_config(preset: str = "desk", path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Preset, then an optional JSON file, then explicit overrides (later wins)."""
    d = preset_dict(preset)
    if path:
        try:
            d = deep_update(d, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from exc
    if overrides:
        d = deep_update(d, overrides)
    return ExperimentConfig.from_dict(d)


def train_preset(name: str, **overrides) -> TrainConfig:
    """TrainConfig of a preset with top-level training overrides (e.g. ``iterations``)."""
    d = preset_dict(name)["train"]
    for k, v in overrides.items():
        if isinstance(v, (DefenseConfig,)):
            v = v.to_dict()
        if k == "model" and not isinstance(v, dict):
            v = v.to_dict()
        d[k] = deep_update(d[k], v) if isinstance(v, dict) and isinstance(d.get(k), dict) else v
    return TrainConfig.from_dict(d)
