"""Experiment configuration: one JSON document, every field defaulted, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields

from .backbone import BackboneConfig
from .bench import TaskSpec
from .errors import ConfigError
from .rater import RaterConfig
from .training import TrainConfig


@dataclass
class ModelConfig:
    d: int = 128
    layers: int = 4
    heads: int = 4
    ffn: int = 512
    time_scale: float = 1000.0


@dataclass
class SizesConfig:
    n_train: int = 4000
    n_val: int = 500
    n_test: int = 500


@dataclass
class EvalConfig:
    seed: int = 0
    success_eps: float = 0.1
    corruption_scale: float = 1.0
    corruption_kind: str = "gaussian-offset"
    corruption_n_random: int = 1
    timing_episodes: int = 100


@dataclass
class DataEfficiencyConfig:
    fractions: list = field(default_factory=lambda: [0.25])
    epochs: int = 200
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    heldout: int = 256


SECTIONS = {
    "bench": TaskSpec,
    "sizes": SizesConfig,
    "model": ModelConfig,
    "rater": RaterConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "data_efficiency": DataEfficiencyConfig,
}


@dataclass
class ExperimentConfig:
    bench: TaskSpec = field(default_factory=TaskSpec)
    sizes: SizesConfig = field(default_factory=SizesConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    rater: RaterConfig = field(default_factory=RaterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data_efficiency: DataEfficiencyConfig = field(default_factory=DataEfficiencyConfig)

    def backbone_config(self) -> BackboneConfig:
        b = self.bench
        return BackboneConfig(L=b.L, D=b.D, S=b.S, d_in=b.d_in, num_tasks=b.num_tasks,
                              **asdict(self.model))

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def validate(self) -> None:
        self.bench.validate()
        self.backbone_config().validate()
        self.rater.validate()
        self.train.validate()


def _line_of(text: str, key: str) -> int | None:
    pat = re.compile(r'"' + re.escape(key) + r'"\s*:')
    for i, line in enumerate(text.splitlines(), 1):
        if pat.search(line):
            return i
    return None


def _where(text: str, key: str) -> str:
    line = _line_of(text, key.split(".")[-1])
    return f" (line {line})" if line else ""


def _coerce(section: str, f: dataclasses.Field, value, text: str):
    key = f"{section}.{f.name}"
    default = getattr(SECTIONS[section](), f.name)
    ok = (
        (isinstance(default, bool) and isinstance(value, bool))
        or (isinstance(default, int) and not isinstance(default, bool)
            and isinstance(value, int) and not isinstance(value, bool))
        or (isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool))
        or (isinstance(default, str) and isinstance(value, str))
        or (isinstance(default, (list, tuple)) and isinstance(value, list))
    )
    if not ok:
        raise ConfigError(
            f"config key {key!r}{_where(text, key)}: expected {type(default).__name__}, "
            f"got {type(value).__name__}"
        )
    return float(value) if isinstance(default, float) else value


def loads(text: str) -> ExperimentConfig:
    """Parse a config document; missing fields take defaults."""
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    cfg = ExperimentConfig()
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}{_where(text, section)}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r}{_where(text, section)} must be an object")
        known = {f.name: f for f in fields(SECTIONS[section])}
        values = {}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"unknown config key {section + '.' + key!r}{_where(text, key)}")
            values[key] = _coerce(section, known[key], value, text)
        setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **values))
    return cfg


def load(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return loads(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
