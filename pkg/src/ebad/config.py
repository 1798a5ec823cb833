"""Run configuration: one YAML file drives the whole pipeline.

Sections: data, trainer, sampler, scoring, eval, synth. Unknown keys are
rejected so typos fail loudly. The sampler's clamp/init/buffer groups nest as

    sampler:
      step_size: 0.01
      noise_scale: null        # null -> sqrt(step_size)
      n_steps: 100
      init: {low: 0.0, high: 1.0}
      clamp: {enabled: true, low: 0.0, high: 1.0}   # or just "clamp: false"
      buffer: {enabled: false, capacity: 1024, reinit_prob: 0.05}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SyntheticSpec
from .errors import EbadError
from .network import NetworkTopology, canonical_topology, topology_for_input
from .sampler import SamplerConfig
from .training import TrainConfig

TOPOLOGY_NAMES = ("auto", "canonical-128", "reduced-64", "reduced-32")


class ConfigError(EbadError):
    """Run-config file is missing, malformed, or has invalid values."""


@dataclass
class DataConfig:
    root: str = "data"
    category: str = "stripes"
    channels: int = 1
    image_size: int = 32

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ConfigError(f"data.channels must be 1 or 3, got {self.channels}")
        if self.image_size < 8:
            raise ConfigError(f"data.image_size must be >= 8, got {self.image_size}")


@dataclass
class ScoringConfig:
    r: int = 2
    sigma_floor: float = 1e-8

    def __post_init__(self):
        if self.r not in (1, 2):
            raise ConfigError(f"scoring.r must be 1 or 2, got {self.r}")
        if self.sigma_floor <= 0:
            raise ConfigError(f"scoring.sigma_floor must be > 0, got {self.sigma_floor}")


@dataclass
class EvalConfig:
    histogram_bins: int = 50

    def __post_init__(self):
        if self.histogram_bins < 2:
            raise ConfigError(f"eval.histogram_bins must be >= 2, got {self.histogram_bins}")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    synth: SyntheticSpec | None = None
    topology_name: str = "auto"

    def topology(self) -> NetworkTopology:
        channels = self.data.channels
        if self.topology_name == "auto":
            return topology_for_input(self.data.image_size, channels)
        if self.topology_name == "canonical-128":
            return canonical_topology(channels)
        size = int(self.topology_name.rsplit("-", 1)[1])
        return topology_for_input(size, channels)


def _build(cls, mapping: dict, section: str):
    if not isinstance(mapping, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    valid = {f.name for f in cls.__dataclass_fields__.values()} if hasattr(cls, "__dataclass_fields__") else set()
    unknown = set(mapping) - valid
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")
    try:
        return cls(**mapping)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from exc


def _build_sampler(mapping: dict) -> SamplerConfig:
    if not isinstance(mapping, dict):
        raise ConfigError("section 'sampler' must be a mapping")
    flat: dict = {}
    known_groups = {"init", "clamp", "buffer"}
    known_scalars = {"step_size", "noise_scale", "n_steps"}
    unknown = set(mapping) - known_groups - known_scalars
    if unknown:
        raise ConfigError(f"unknown key(s) in sampler: {sorted(unknown)}")
    for key in known_scalars & set(mapping):
        flat[key] = mapping[key]
    if "init" in mapping:
        group = mapping["init"]
        _check_group_keys("sampler.init", group, {"low", "high"})
        flat.update({f"init_{k}": v for k, v in group.items()})
    if "clamp" in mapping:
        group = mapping["clamp"]
        if isinstance(group, bool):
            flat["clamp_enabled"] = group
        else:
            _check_group_keys("sampler.clamp", group, {"enabled", "low", "high"})
            flat.update({f"clamp_{k}" if k != "enabled" else "clamp_enabled": v
                         for k, v in group.items()})
    if "buffer" in mapping:
        group = mapping["buffer"]
        _check_group_keys("sampler.buffer", group, {"enabled", "capacity", "reinit_prob"})
        flat.update({f"buffer_{k}": v for k, v in group.items()})
    try:
        return SamplerConfig(**flat)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid sampler section: {exc}") from exc


def _check_group_keys(name: str, group, valid: set) -> None:
    if not isinstance(group, dict):
        raise ConfigError(f"{name} must be a mapping")
    unknown = set(group) - valid
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {sorted(unknown)}")


def load_config(path, seed_override: int | None = None) -> RunConfig:
    """Parse and validate a YAML run config; optionally override all seeds."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    known = {"data", "trainer", "sampler", "scoring", "eval", "synth", "topology"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")

    sampler = _build_sampler(raw.get("sampler", {}))
    trainer_map = dict(raw.get("trainer", {}))
    if not isinstance(trainer_map, dict):
        raise ConfigError("section 'trainer' must be a mapping")
    trainer_map["sampler"] = sampler
    trainer = _build(TrainConfig, trainer_map, "trainer")

    config = RunConfig(
        data=_build(DataConfig, raw.get("data", {}), "data"),
        trainer=trainer,
        scoring=_build(ScoringConfig, raw.get("scoring", {}), "scoring"),
        evaluation=_build(EvalConfig, raw.get("eval", {}), "eval"),
        synth=_build(SyntheticSpec, raw["synth"], "synth") if "synth" in raw else None,
        topology_name=raw.get("topology", "auto"),
    )
    if config.topology_name not in TOPOLOGY_NAMES:
        raise ConfigError(
            f"topology must be one of {TOPOLOGY_NAMES}, got {config.topology_name!r}")
    if seed_override is not None:
        config.trainer.seed = seed_override
        if config.synth is not None:
            config.synth.seed = seed_override
    return config
