"""Experiment configuration and seed expansion."""
from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .csaa import POOLED_NAMES, Switches
from .encoder import EncoderConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    train: str | None = None
    dev: str | None = None
    test: str | None = None
    embeddings: str | None = None
    checkpoint: str | None = None
    output: str | None = None
    # model
    mode: str = "hybrid"
    word_dim: int = 300
    filter_sizes: tuple[int, ...] = (3, 5, 7)
    feature_maps: int = 50
    lstm_size: int = 75
    attention_dim: int | None = None
    num_classes: int | None = None
    max_len: int = 512
    # training
    dropout: float = 0.5
    dropout_encoder: bool = True
    dropout_pooled: bool = True
    batch_size: int = 32
    max_norm: float = 3.0
    max_norm_head: bool = True
    max_norm_attention: bool = True
    rho: float = 0.95
    adadelta_eps: float = 1e-6
    seed: int = 1
    patience: int = 5
    max_epochs: int = 30
    dev_subset: int | None = None
    heads: tuple[str, ...] = POOLED_NAMES
    log_train_accuracy: bool = False
    # ablations
    disable_shared: bool = False
    disable_gate: bool = False
    upa_baseline: bool = False
    workers: int = 1

    def __post_init__(self):
        self.filter_sizes = tuple(int(h) for h in self.filter_sizes)
        self.heads = tuple(self.heads)
        self.validate()

    def validate(self) -> None:
        try:
            self.encoder_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for name in ("word_dim", "batch_size", "max_len", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.attention_dim is not None and self.attention_dim <= 0:
            raise ConfigError("attention_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.max_norm <= 0:
            raise ConfigError("max_norm must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be non-negative")
        unknown = [h for h in self.heads if h not in POOLED_NAMES]
        if unknown or not self.heads:
            raise ConfigError(f"heads must be a non-empty subset of {POOLED_NAMES}, got {self.heads}")
        if sum([self.disable_shared, self.disable_gate, self.upa_baseline]) > 1:
            raise ConfigError("ablation switches are mutually exclusive")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.word_dim, self.filter_sizes, self.feature_maps, self.lstm_size, self.mode)

    def switches(self) -> Switches:
        return Switches(self.disable_shared, self.disable_gate, self.upa_baseline)

    @property
    def hidden_dim(self) -> int:
        return self.encoder_config().output_dim

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        clean = {}
        for key, v in values.items():
            key = key.replace("-", "_")
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            clean[key] = v
        return cls(**clean)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)

    def dump_toml(self) -> str:
        lines = []
        for key, v in self.to_dict().items():
            if v is None:
                continue
            lines.append(f"{key} = {json.dumps(v)}")
        return "\n".join(lines) + "\n"


def derive_seed(seed: int, purpose: str, *counters: int) -> int:
    """Expand the run seed into an independent 64-bit seed per purpose."""
    key = [seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode()), *counters]
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])


def rng_for(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose, *counters))
