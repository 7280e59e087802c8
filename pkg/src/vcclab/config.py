"""Experiment config files.

A config is TOML with five optional sections; every key has a default and
unknown keys are rejected::

    [model]        # ModelConfig fields
    [data]         # DataConfig fields plus train_path / eval_path
    [plan]         # scheme, scale, kind, stages
    [training]     # TrainConfig fields
    [diagnostics]  # Ks, Ss, eval_samples, probe_samples

``[plan] scheme`` names a built-in schedule. ``scheme = "custom"`` uses the
``stages`` list instead, each entry holding ``fraction`` plus compressor
fields.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .compressor import Kind
from .errors import ConfigError
from .model import ModelConfig
from .schedule import SCHEME_NAMES, StagePlan, named_scheme
from .tasks import DataConfig
from .trainer import RunConfig, TrainConfig

SECTIONS = ("model", "data", "plan", "training", "diagnostics")


@dataclass
class PlanConfig:
    scheme: str = "single"
    scale: str = "desk"
    kind: str = "avgpool"
    stages: list[dict] = field(default_factory=list)

    def build(self, n_layers: int) -> StagePlan:
        if self.scheme == "custom":
            if not self.stages:
                raise ConfigError("plan.scheme = 'custom' needs a non-empty plan.stages list")
            return StagePlan.from_dict({"name": "custom", "stages": self.stages})
        if self.stages:
            raise ConfigError("plan.stages is only read when plan.scheme = 'custom'")
        if self.scheme not in SCHEME_NAMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEME_NAMES} or 'custom'")
        return named_scheme(self.scheme, self.scale, n_layers, Kind.parse(self.kind))


@dataclass
class DiagnosticsConfig:
    Ks: list[int] = field(default_factory=lambda: [2, 4])
    Ss: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    eval_samples: int = 0  # 0 means the whole eval split
    probe_samples: int = 256


@dataclass
class DataSection(DataConfig):
    train_path: str = ""
    eval_path: str = ""

    def data_config(self) -> DataConfig:
        d = asdict(self)
        d.pop("train_path")
        d.pop("eval_path")
        return DataConfig(**d)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSection = field(default_factory=DataSection)
    plan: PlanConfig = field(default_factory=PlanConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        extra = set(d) - set(SECTIONS)
        if extra:
            raise ConfigError(f"unknown config sections: {sorted(extra)}")
        kw = {}
        for f in fields(cls):
            section = d.get(f.name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"[{f.name}] must be a table")
            kw[f.name] = _build(f.name, f.default_factory, section)
        cfg = cls(**kw)
        cfg.run_config()  # validates cross-section constraints
        return cfg

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def run_id(self) -> str:
        """Content hash of the effective config."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = self.to_dict()
        d["data"]["seed"] = seed
        d["training"]["seed"] = seed
        d["training"]["order_seed"] = seed
        return ExperimentConfig.from_dict(d)

    def seeds(self) -> dict[str, int]:
        return {"data": self.data.seed, "init": self.training.seed, "order": self.training.order_seed}

    def run_config(self) -> RunConfig:
        try:
            self.model.validate()
            plan = self.plan.build(self.model.n_layers)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        run = RunConfig(
            model=self.model,
            data=self.data.data_config(),
            plan=plan,
            train=self.training,
            train_path=self.data.train_path or None,
            eval_path=self.data.eval_path or None,
        )
        try:
            run.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return run


def _build(section: str, factory, values: dict):
    proto = factory()
    known = {f.name: f for f in fields(proto)}
    extra = set(values) - set(known)
    if extra:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
    kw = {}
    for k, v in values.items():
        default = getattr(proto, k)
        if isinstance(default, bool) != isinstance(v, bool):
            raise ConfigError(f"[{section}] {k} must be {type(default).__name__}, got {v!r}")
        if isinstance(default, float) and isinstance(v, int):
            v = float(v)
        if not isinstance(v, type(default)):
            raise ConfigError(f"[{section}] {k} must be {type(default).__name__}, got {v!r}")
        kw[k] = v
    return type(proto)(**{**asdict(proto), **kw})


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} not found")
    try:
        raw = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from e
    return ExperimentConfig.from_dict(raw)


def parse_config(text: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_dict(tomllib.loads(text))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(str(e)) from e
