"""Pipeline configuration: one JSON file, flag overrides, env overrides.

Precedence is flags > environment > file > defaults.  The resolved config is
embedded into every run manifest so each artifact can be reproduced from its
manifest alone.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

from .errors import ConfigInvalid
from .gateway import GatewayConfig
from .trainer import TrainConfig


@dataclass
class SplitConfig:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 7
    stratify_task: str = "type"


@dataclass
class AdapterConfig:
    rank: int = 16
    alpha: float = 8.0
    dropout: float = 0.05
    targets: tuple[str, ...] = ("attn.query", "attn.value")
    seed: int = 12


@dataclass
class ModelConfig:
    backend_id: str = "toy"
    pooling: str = "cls"
    weights_dir: str = ""
    seed: int = 11
    head_seed: int = 13
    toy: dict = field(default_factory=dict)   # EncoderConfig overrides for the toy


@dataclass
class PipelineConfig:
    corpus: str = "data/synthetic/corpus.jsonl"
    corpus_format: str = "jsonl"
    workdir: str = "work"
    split: SplitConfig = field(default_factory=SplitConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    # 2e-3 suits the desk-scale toy encoder; full-size encoders want ~2e-4.
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=2e-3))
    model: ModelConfig = field(default_factory=ModelConfig)

    # -- derived paths ----------------------------------------------------

    def splits_dir(self) -> str:
        return os.path.join(self.workdir, "splits")

    def bundles_dir(self) -> str:
        return os.path.join(self.workdir, "bundles")

    def variants_dir(self) -> str:
        return os.path.join(self.workdir, "variants")

    def runs_dir(self) -> str:
        return os.path.join(self.workdir, "runs")

    def reports_dir(self) -> str:
        return os.path.join(self.workdir, "reports")

    def cache_dir(self) -> str:
        return self.gateway.cache_dir or os.path.join(self.workdir, "cache")

    def to_json(self) -> dict:
        data = asdict(self)
        data["split"]["ratios"] = list(self.split.ratios)
        data["adapter"]["targets"] = list(self.adapter.targets)
        data["train"]["tasks"] = list(self.train.tasks)
        return data

    def validate(self) -> None:
        try:
            self.train.validate()
        except ValueError as e:
            raise ConfigInvalid(str(e)) from e
        if len(self.split.ratios) != 3:
            raise ConfigInvalid(f"split.ratios must have 3 entries, got {self.split.ratios}")
        if self.adapter.rank < 1:
            raise ConfigInvalid("adapter.rank must be >= 1")
        if not 0.0 <= self.adapter.dropout < 1.0:
            raise ConfigInvalid("adapter.dropout must be in [0, 1)")


def _build_section(cls, data: dict, section: str):
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigInvalid(f"unknown keys in {section!r}: {sorted(unknown)}")
    kwargs = dict(data)
    for key in ("ratios", "targets", "tasks"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def load_config(path: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Build the config from (optional) file plus flat override dict.

    Override keys use dotted paths, e.g. {"gateway.backend": "mock",
    "train.epochs": 2}.
    """
    raw: dict = {}
    if path:
        if not os.path.exists(path):
            raise ConfigInvalid(f"config file {path} not found")
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigInvalid(f"config file {path} is not valid JSON: {e}") from e

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value

    sections = {"split": SplitConfig, "gateway": GatewayConfig,
                "adapter": AdapterConfig, "train": TrainConfig, "model": ModelConfig}
    kwargs: dict = {}
    for key, value in raw.items():
        if key in sections:
            if not isinstance(value, dict):
                raise ConfigInvalid(f"section {key!r} must be an object")
            if key == "train":
                # keep the desk-scale default even for partial train sections
                value = {"learning_rate": 2e-3, **value}
            kwargs[key] = _build_section(sections[key], value, key)
        elif key in ("corpus", "corpus_format", "workdir"):
            kwargs[key] = value
        else:
            raise ConfigInvalid(f"unknown config key {key!r}")
    try:
        cfg = PipelineConfig(**kwargs)
    except TypeError as e:
        raise ConfigInvalid(str(e)) from e
    cfg.validate()
    return cfg
