"""Dataclass configs for the model and the training recipe.

Configs are plain dataclasses so they serialize cleanly to JSON; every
artifact the CLI writes embeds the resolved config plus the seed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by the transformer and U-Net backbones."""

    arch: str = "ugformer"          # "ugformer" or "unet"
    in_channels: int = 1
    base_channels: int = 32
    num_stages: int = 3
    num_heads: int = 4
    use_mhsa: bool = True
    use_dconv: bool = True
    use_gcn: bool = True
    node_budget: int = 1024         # bridge applied only where H*W <= node_budget
    num_classes: int = 1

    def __post_init__(self):
        if self.arch not in ("ugformer", "unet"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.base_channels < 1 or self.num_stages < 1:
            raise ConfigError("base_channels and num_stages must be positive")
        if self.arch == "ugformer":
            if not (self.use_mhsa or self.use_dconv):
                raise ConfigError("at least one of use_mhsa/use_dconv must be enabled")
            for c in self.stage_channels[1:]:
                if self.use_mhsa and c % self.num_heads != 0:
                    raise ConfigError(
                        f"num_heads={self.num_heads} does not divide stage width {c}")

    @property
    def stage_channels(self) -> list[int]:
        """Channel widths [C0, 2*C0, ..., 2^L * C0] from the stem down to the bottleneck."""
        return [self.base_channels * (2 ** i) for i in range(self.num_stages + 1)]

    @property
    def total_stride(self) -> int:
        """Input height/width must be divisible by this."""
        return 2 ** (self.num_stages + 1)


@dataclass
class TrainConfig:
    """Optimization recipe: batching, learning-rate schedule, loss weights."""

    epochs: int = 30
    batch_size: int = 8
    initial_lr: float = 1e-4
    decay_factor: float = 0.1
    decay_policy: str = "record"    # "record" (decay on new best) or "plateau"
    plateau_patience: int = 3
    momentum: float = 0.0           # 0.0 keeps the optimizer plain SGD
    seed: int = 0
    lambda_bce: float = 0.5
    lambda_dice: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0.0 < self.decay_factor < 1.0):
            raise ConfigError("decay_factor must be in (0, 1)")
        if self.decay_policy not in ("record", "plateau"):
            raise ConfigError(f"unknown decay_policy {self.decay_policy!r}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must be in [0, 1)")


def _from_mapping(cls, mapping: dict[str, Any]):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**mapping)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config_file(path) -> tuple[ModelConfig, TrainConfig]:
    """Parse a JSON config file with optional "model" and "train" sections."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown top-level config sections: {sorted(unknown)}")
    model = _from_mapping(ModelConfig, raw.get("model", {}))
    train = _from_mapping(TrainConfig, raw.get("train", {}))
    return model, train


def config_to_dict(model: ModelConfig, train: TrainConfig) -> dict[str, Any]:
    return {"model": dataclasses.asdict(model), "train": dataclasses.asdict(train)}
