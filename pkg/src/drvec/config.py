"""Config documents: nested dataclass <-> dict conversion with strict
unknown-key rejection, plus the training configuration and its presets.

The CLI reads a JSON document shaped like ``TrainConfig.to_dict()``;
command-line flags override file values, and ``DRV_SEED`` is a last-resort
seed override (any explicit value wins).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import get_type_hints

from .embedder import DESK_EMBEDDER, FULL_EMBEDDER, EmbedderConfig
from .errors import ConfigError
from .head import SwitchConfig
from .losses import DESK_BATCH, FULL_BATCH, LOSS_KINDS, MiniBatchSpec


def dataclass_from_dict(cls, data: dict, path: str = ""):
    """Build a (possibly nested) dataclass from a plain dict, rejecting
    unknown keys so typos fail before any work starts."""
    if not isinstance(data, dict):
        raise ConfigError(f"config node {path or cls.__name__!r} must be an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} under {path or cls.__name__!r}")
    hints = get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        target = hints.get(name, None)
        if dataclasses.is_dataclass(target) and isinstance(value, dict):
            kwargs[name] = dataclass_from_dict(target, value, f"{path}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid config under {path or cls.__name__!r}: {exc}") from exc


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "ge2e_xs"
    steps: int = 400
    learning_rate: float = 0.1
    clip_norm: float = 3.0
    seed: int = 1
    eval_every: int = 50
    batch: MiniBatchSpec = field(default_factory=lambda: DESK_BATCH)
    embedder: EmbedderConfig = field(default_factory=lambda: DESK_EMBEDDER)
    switches: SwitchConfig = field(default_factory=lambda: SwitchConfig(A=True, B=True, C=True, d=24))
    dnn_width: int = 64
    eval_n_enroll: int = 4
    eval_n_target: int = 120
    eval_n_nontarget: int = 120

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        self.switches.validate_for(self.embedder.embedding_dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return dataclass_from_dict(cls, data)

    def model_config(self):
        from .model import ModelConfig
        return ModelConfig(embedder=self.embedder, switches=self.switches,
                           dnn_width=self.dnn_width)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def desk_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**overrides)


def full_train_config(**overrides) -> TrainConfig:
    base = dict(batch=FULL_BATCH, embedder=FULL_EMBEDDER,
                switches=SwitchConfig(A=True, B=True, C=True, d=200), dnn_width=256)
    base.update(overrides)
    return TrainConfig(**base)


def load_config_file(path) -> dict:
    try:
        with open(path, "r") as handle:
            return json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
