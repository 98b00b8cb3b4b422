"""Run configuration: ``key = value`` files with dotted section keys.

Keys are written ``section.name``; a bare ``name`` is accepted when exactly
one section defines it. Precedence is CLI override > file > defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, UsageError


@dataclass
class DataConfig:
    dir: str = "data"
    seed: int = 0
    languages: str = "A,B"
    size_a: int = 12
    size_b: int = 14
    shared: int = 8
    visemes: int = 0
    words: int = 50
    samples_per_word: int = 20
    word_len_min: int = 2
    word_len_max: int = 5
    dur_min: int = 2
    dur_max: int = 4
    feature_dim: int = 16
    noise_std: float = 0.1
    train_fraction: float = 0.75

    @property
    def language_names(self) -> tuple[str, str]:
        names = tuple(s.strip() for s in self.languages.split(",") if s.strip())
        if len(names) != 2:
            raise ConfigError(f"data.languages must name two languages, got {self.languages!r}")
        return names


@dataclass
class ModelConfig:
    d_model: int = 64
    d_ff: int = 128
    enc_blocks: int = 2
    dec_blocks: int = 2
    heads: int = 4
    d_k: int = 16
    d_v: int = 16
    dropout: float = 0.1
    max_len: int = 8


@dataclass
class TrainConfig:
    variant: str = "SBL-All"
    language: str = ""
    batch_size: int = 32
    max_steps: int = 1000
    epochs: float = 0.0
    warmup: int = 100
    lr_factor: float = 0.5
    gamma: float = 0.5
    lambda_l2r: float = 0.5
    lambda_r2l: float = 0.5
    seed: int = 0
    eval_interval: int = 0
    language_mix: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    max_train: int = 0


@dataclass
class EvalConfig:
    mode: str = "all"
    split: str = "test"
    sample: str = ""


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sections(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def copy(self) -> RunConfig:
        return RunConfig(**{name: dataclasses.replace(sec) for name, sec in self.sections().items()})

    def resolve(self, key: str) -> tuple[str, str]:
        key = key.strip()
        sections = self.sections()
        if "." in key:
            section, name = key.split(".", 1)
            if section not in sections or name not in _field_names(sections[section]):
                raise UsageError(f"unknown config key {key!r}")
            return section, name
        owners = [s for s, sec in sections.items() if key in _field_names(sec)]
        if not owners:
            raise UsageError(f"unknown config key {key!r}")
        if len(owners) > 1:
            raise UsageError(f"config key {key!r} is ambiguous; use one of " + ", ".join(f"{s}.{key}" for s in owners))
        return owners[0], key

    def set(self, key: str, value: str) -> None:
        section, name = self.resolve(key)
        sec = self.sections()[section]
        kind = type(getattr(type(sec)(), name))
        setattr(sec, name, _coerce(kind, value.strip(), f"{section}.{name}"))

    def apply(self, assignments) -> RunConfig:
        for item in assignments:
            if "=" not in item:
                raise UsageError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            self.set(key, value)
        return self

    def to_text(self) -> str:
        lines = []
        for section, sec in self.sections().items():
            for f in dataclasses.fields(sec):
                lines.append(f"{section}.{f.name} = {getattr(sec, f.name)}")
        return "\n".join(lines) + "\n"


def _field_names(sec) -> set[str]:
    return {f.name for f in dataclasses.fields(sec)}


def _coerce(kind, value: str, key: str):
    try:
        if kind is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None
    return value


def parse_config_text(text: str, base: RunConfig | None = None, origin: str = "<config>") -> RunConfig:
    cfg = base.copy() if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        try:
            cfg.set(key, value)
        except UsageError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return cfg


def load_config(path: str | Path | None = None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        cfg = parse_config_text(p.read_text(encoding="utf-8"), cfg, str(p))
    return cfg.apply(overrides)
