"""Run configuration: one JSON document with a section per component.

Unknown keys are rejected at every level so a typo never silently falls
back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .imgproc import AugmentConfig, PreprocessConfig
from .losses import LossConfig
from .model import ModelConfig
from .optim import OptimConfig
from .synthgen import SceneConfig


@dataclass
class TrainConfig:
    batch_size: int = 4
    max_steps: int = 2000
    eval_every: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0:
            raise ConfigError(f"train.max_steps must be >= 0, got {self.max_steps}")
        if self.eval_every < 1:
            raise ConfigError(f"train.eval_every must be >= 1, got {self.eval_every}")


@dataclass
class DataConfig:
    train_dir: str | None = None
    val_dir: str | None = None
    test_dir: str | None = None
    # select rows of manifest.json by their "split" field instead of using whole directories
    use_manifest_splits: bool = False

    def validate(self) -> None:
        pass

    def require(self, key: str) -> Path:
        value = getattr(self, key)
        if value is None:
            raise ConfigError(f"data.{key} is required for this command")
        path = Path(value)
        if not path.is_dir():
            raise ConfigError(f"data.{key}: directory does not exist: {path}")
        return path

    def split_for(self, key: str) -> str | None:
        return key.removesuffix("_dir") if self.use_manifest_splits else None


_SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "augment": AugmentConfig,
    "preprocess": PreprocessConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "scene": SceneConfig,
}


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(fields)}")
    kwargs = {}
    for k, v in d.items():
        default = fields[k].default
        # JSON has no tuples; restore the pair-valued ranges
        if isinstance(v, list) and isinstance(default, tuple):
            if len(v) != len(default):
                raise ConfigError(f"{where}.{k}: expected {len(default)} values, got {len(v)}")
            v = tuple(v)
        kwargs[k] = v
    try:
        obj = cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    try:
        obj.validate()
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{where}: invalid value type ({exc})") from exc
    return obj


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def validate(self) -> None:
        for name in _SECTIONS:
            getattr(self, name).validate()

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict, where: str = "config") -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"{where}: top level must be an object")
        unknown = sorted(set(d) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"{where}: unknown section(s) {unknown}; allowed: {sorted(_SECTIONS)}")
        return cls(**{name: _build(_SECTIONS[name], d.get(name, {}), f"{where}: {name}") for name in _SECTIONS})


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return RunConfig.from_dict(raw, where=str(path))
