"""Run configuration shared by all CLI stages (one JSON file, flags override)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError
from .llm import BackendConfig
from .model import ModelConfig
from .synth import SynthConfig
from .train import EvalConfig, TrainConfig


@dataclass
class RunConfig:
    data: str | None = None
    cache_dir: str | None = None
    c: int = 16
    s: int = 8
    segmenting: str = "count"
    recent_template: str = "synthetic_recent"    # builtin name or a file path
    global_template: str = "synthetic_global"
    workers: int = 1
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    backend: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.c < 2 or self.c % 2:
            raise ConfigError(f"window c must be an even integer >= 2, got {self.c}")
        if self.s < 1:
            raise ConfigError(f"segments s must be >= 1, got {self.s}")
        if self.segmenting not in ("count", "time"):
            raise ConfigError(f"segmenting must be 'count' or 'time', got {self.segmenting!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        # validate the nested sections early so errors surface before any work
        self.backend_config()
        self.encoder_config()
        self.train_config()
        self.eval_config()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown config fields: {extra}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def _build(self, cls, section: dict, name: str, **overrides):
        args = {**section, **overrides}
        known = {f.name for f in fields(cls)}
        extra = sorted(set(args) - known)
        if extra:
            raise ConfigError(f"unknown {name} config fields: {extra}")
        try:
            return cls(**args)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name} config: {exc}") from None

    def backend_config(self) -> BackendConfig:
        return self._build(BackendConfig, self.backend, "backend")

    def encoder_config(self) -> EncoderConfig:
        return self._build(EncoderConfig, self.encoder, "encoder")

    def train_config(self, **overrides) -> TrainConfig:
        return self._build(TrainConfig, self.train, "train", **overrides)

    def eval_config(self, **overrides) -> EvalConfig:
        return self._build(EvalConfig, self.eval, "eval", **overrides)

    def synth_config(self) -> SynthConfig:
        return self._build(SynthConfig, self.synth, "synth")

    def model_config(self, **overrides) -> ModelConfig:
        """Feature widths always follow the backend and encoder."""
        overrides.setdefault("d_llm", self.backend_config().d_llm)
        overrides.setdefault("d_bert", self.encoder_config().d_bert)
        return self._build(ModelConfig, self.model, "model", **overrides)
