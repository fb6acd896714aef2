"""Experiment configuration: one TOML file, strictly validated before any compute.

Precedence is CLI flags > file > dataclass defaults.  Unknown keys and
wrongly typed values are rejected with the dotted key in the message.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .data.synthetic import SyntheticTaskSpec
from .discriminator import DiscriminatorConfig, patch_grid_size
from .generator import GeneratorConfig
from .tensor import ConfigError
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # or "directory"
    dir: str = "data"
    task: str = "seg_maps"
    image_size: int = 64
    min_shapes: int = 1
    max_shapes: int = 4
    seed: int = 0
    count: int = 64

    def __post_init__(self):
        if self.source not in ("synthetic", "directory"):
            raise ConfigError(f"data.source must be synthetic or directory, got {self.source!r}")
        if self.count < 0:
            raise ConfigError("data.count must be >= 0")
        self.synthetic_spec()

    def synthetic_spec(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(self.task, self.image_size, self.min_shapes, self.max_shapes,
                                 self.seed)


@dataclass(frozen=True)
class MetricsConfig:
    provider: str = "pooled_pixels"  # or "embedding_file"
    grid: int = 8
    embedding_file: str = ""
    embedding_dim: int = 0
    temperature: float = 4.0

    def __post_init__(self):
        if self.provider not in ("pooled_pixels", "embedding_file"):
            raise ConfigError(
                f"metrics.provider must be pooled_pixels or embedding_file, got {self.provider!r}")
        if self.provider == "embedding_file" and (not self.embedding_file or self.embedding_dim < 1):
            raise ConfigError("metrics.embedding_file and metrics.embedding_dim are required "
                              "for the embedding_file provider")
        if self.grid < 1:
            raise ConfigError("metrics.grid must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    out_dir: str = "runs/default"
    metrics_file: str = "metrics.csv"

    def validate(self) -> "ExperimentConfig":
        g, d, data = self.generator, self.discriminator, self.data
        if g.image_size != data.image_size:
            raise ConfigError(
                f"generator.image_size {g.image_size} != data.image_size {data.image_size}")
        spec = data.synthetic_spec()
        if data.source == "synthetic" and (g.in_channels, g.out_channels) != (
                spec.input_channels, spec.target_channels):
            raise ConfigError(
                f"generator.in_channels/out_channels {g.in_channels}/{g.out_channels} do not fit "
                f"task {spec.task!r} ({spec.input_channels}/{spec.target_channels})")
        if self.train.mode == "cgan_l1":
            if (d.condition_channels, d.image_channels) != (g.in_channels, g.out_channels):
                raise ConfigError(
                    f"discriminator.condition_channels/image_channels "
                    f"{d.condition_channels}/{d.image_channels} must equal generator "
                    f"in_channels/out_channels {g.in_channels}/{g.out_channels}")
            patch_grid_size(d, g.image_size)
        return self

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)


_SECTIONS = {
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "metrics": MetricsConfig,
}
_TOP_LEVEL = {"out_dir": str, "metrics_file": str}


def _coerce(key: str, value, default):
    expected = type(default)
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(f"{key}: expected {expected.__name__}, got {type(value).__name__} {value!r}")
    return value


def _build_section(name: str, cls, raw: dict, overrides: dict):
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key {name}.{unknown[0]}")
    values = {k: _coerce(f"{name}.{k}", v, defaults[k]) for k, v in raw.items()}
    values.update(overrides)
    try:
        return cls(**values)
    except ConfigError as e:
        msg = str(e)
        raise ConfigError(msg if f"{name}." in msg else f"[{name}] {msg}") from None


def config_from_dict(raw: dict, overrides: dict | None = None) -> ExperimentConfig:
    """``overrides`` maps dotted keys (``train.seed``, ``out_dir``) to values."""
    overrides = overrides or {}
    unknown = sorted(k for k in raw if k not in _SECTIONS and k not in _TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        sect = {k.split(".", 1)[1]: v for k, v in overrides.items() if k.startswith(name + ".")}
        kwargs[name] = _build_section(name, cls, raw.get(name, {}), sect)
    for key, typ in _TOP_LEVEL.items():
        val = overrides.get(key, raw.get(key))
        if val is not None:
            if not isinstance(val, typ):
                raise ConfigError(f"{key}: expected {typ.__name__}")
            kwargs[key] = val
    return ExperimentConfig(**kwargs).validate()


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path, "rb") as f:
            raw = tomli.load(f)
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return config_from_dict(raw, overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    """TOML text that round-trips through :func:`load_config`."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        return repr(v)

    lines = [f"out_dir = {fmt(cfg.out_dir)}", f"metrics_file = {fmt(cfg.metrics_file)}"]
    for name in _SECTIONS:
        lines.append(f"\n[{name}]")
        for k, v in dataclasses.asdict(getattr(cfg, name)).items():
            lines.append(f"{k} = {fmt(v)}")
    return "\n".join(lines) + "\n"
