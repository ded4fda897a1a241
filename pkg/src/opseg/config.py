"""Strict run configuration: model, train, preprocess and cascade sections.

Configs are JSON objects.  Unknown sections or keys are errors; missing
keys take the defaults below.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .segnet import SUPPORTED_DECODER_BLOCKS, DenseEncoderConfig, TrainConfig

PROVIDERS = ("none", "gt", "gt-jitter", "heuristic")


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    q: int = 3
    growth_rate: int = 8
    block_layer_counts: list[int] = field(default_factory=lambda: [2, 2, 4, 4, 4])
    decoder_blocks: int = 5
    input_size: int = 96
    initial_channels: int = 16
    dropout_rate: float = 0.1

    def validate(self):
        if self.q < 1:
            raise ConfigError(f"model.q must be >= 1, got {self.q}")
        if self.decoder_blocks not in SUPPORTED_DECODER_BLOCKS:
            raise ConfigError(f"model.decoder_blocks must be one of {SUPPORTED_DECODER_BLOCKS}")
        if len(self.block_layer_counts) != self.decoder_blocks:
            raise ConfigError("model.block_layer_counts length must equal model.decoder_blocks")
        if self.input_size % (2 ** self.decoder_blocks):
            raise ConfigError(f"model.input_size {self.input_size} not divisible by 2^{self.decoder_blocks}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"model.dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.growth_rate < 1 or self.initial_channels < 1:
            raise ConfigError("model.growth_rate and model.initial_channels must be >= 1")

    def encoder(self) -> DenseEncoderConfig:
        return DenseEncoderConfig(self.growth_rate, tuple(self.block_layer_counts), self.initial_channels,
                                  self.input_size)


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    augmentation: bool = False
    loss_weights: list[float] = field(default_factory=lambda: [1.0, 1.0])

    def validate(self):
        if len(self.loss_weights) != 2:
            raise ConfigError("train.loss_weights must hold [cross_entropy, dice]")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.seed, self.augmentation,
                           tuple(self.loss_weights))


@dataclass
class PreprocessSection:
    enabled: bool = False
    slice_fraction: float = 0.2
    sigma: float = 0.8
    clahe_tiles: int = 8
    clahe_clip: float = 2.0

    def validate(self):
        if not 0.0 <= self.slice_fraction < 0.5:
            raise ConfigError(f"preprocess.slice_fraction must lie in [0, 0.5), got {self.slice_fraction}")
        if self.sigma <= 0 or self.clahe_tiles < 1 or self.clahe_clip < 1:
            raise ConfigError("preprocess: need sigma > 0, clahe_tiles >= 1, clahe_clip >= 1")


@dataclass
class CascadeSection:
    provider: str = "gt"
    pad_frac: float = 0.05
    jitter_frac: float = 0.1
    threshold_quantile: float = 0.85
    out_size: int = 96

    def validate(self):
        if self.provider not in PROVIDERS:
            raise ConfigError(f"cascade.provider must be one of {PROVIDERS}, got {self.provider!r}")
        if self.pad_frac < 0 or self.jitter_frac < 0:
            raise ConfigError("cascade.pad_frac and cascade.jitter_frac must be >= 0")
        if not 0.0 < self.threshold_quantile < 1.0:
            raise ConfigError("cascade.threshold_quantile must lie in (0, 1)")


SECTIONS = {
    "model": ModelSection,
    "train": TrainSection,
    "preprocess": PreprocessSection,
    "cascade": CascadeSection,
}


def _coerce(section: str, name: str, default, value):
    kind = type(default)
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
        value = float(value) if ok else value
    elif kind is list:
        ok = isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
        if ok and default and isinstance(default[0], int):
            ok = all(isinstance(v, int) for v in value)
        if ok and default and isinstance(default[0], float):
            value = [float(v) for v in value]
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"{section}.{name}: expected {kind.__name__}, got {value!r}")
    return value


def _build_section(name: str, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    proto = cls()
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}")
    values = {k: _coerce(name, k, getattr(proto, k), v) for k, v in raw.items()}
    sec = cls(**values)
    sec.validate()
    return sec


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    cascade: CascadeSection = field(default_factory=CascadeSection)

    def __post_init__(self):
        for name in SECTIONS:
            getattr(self, name).validate()
        if self.cascade.out_size != self.model.input_size:
            raise ConfigError(
                f"cascade.out_size {self.cascade.out_size} must equal model.input_size {self.model.input_size}"
            )

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        for key in raw:
            if key not in SECTIONS and key != "format":
                raise ConfigError(f"unknown section {key!r}")
        built = {name: _build_section(name, sc, raw.get(name, {})) for name, sc in SECTIONS.items()}
        if "out_size" not in raw.get("cascade", {}):
            built["cascade"].out_size = built["model"].input_size
        return cls(**built)

    def to_dict(self) -> dict:
        return {"format": "opseg/1", **{name: asdict(getattr(self, name)) for name in SECTIONS}}


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from None
    return RunConfig.from_dict(raw)
