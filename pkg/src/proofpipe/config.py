"""Declarative pipeline configuration.

One YAML file configures every stage. Absent keys fall back to the
defaults baked into each section (the published training regime at toy
scale); unknown keys are rejected so typos cannot silently change a run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from .buffers import BufferConfig
from .errors import ParseError, ValidationError
from .objective import ClipConfig, MixConfig
from .rewards import RewardChainConfig
from .sampler import SamplerConfig
from .tts import TtsConfig


@dataclass(frozen=True)
class CurriculumConfig:
    """Toy SFT settings for the curriculum stage."""

    sft_learning_rate: float = 0.1
    sft_epochs: int = 4

    def __post_init__(self):
        if self.sft_learning_rate < 0:
            raise ValueError("sft_learning_rate must be non-negative")
        if self.sft_epochs < 0:
            raise ValueError("sft_epochs must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    """Training-simulation settings: the emit-target-string task."""

    steps: int = 200
    learning_rate: float = 0.5
    updates_per_rollout: int = 1
    vocab_size: int = 6
    target_tokens: tuple[int, ...] = (2, 0, 3, 1)
    pool_size: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "target_tokens", tuple(self.target_tokens))
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.updates_per_rollout < 1:
            raise ValueError("updates_per_rollout must be positive")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if not self.target_tokens:
            raise ValueError("target_tokens must be non-empty")
        for tok in self.target_tokens:
            if not 0 <= tok < self.vocab_size:
                raise ValueError("target_tokens outside the vocabulary")
        if self.pool_size is not None and self.pool_size < 1:
            raise ValueError("pool_size must be positive")


_SECTIONS = {
    "curriculum": CurriculumConfig,
    "sampler": SamplerConfig,
    "buffers": BufferConfig,
    "clip": ClipConfig,
    "mix": MixConfig,
    "tts": TtsConfig,
    "rewards": RewardChainConfig,
    "train": TrainConfig,
}

_TUPLE_FIELDS = {
    ("rewards", "template_tokens"),
    ("train", "target_tokens"),
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    buffers: BufferConfig = field(default_factory=BufferConfig)
    clip: ClipConfig = field(default_factory=ClipConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    tts: TtsConfig = field(default_factory=TtsConfig)
    rewards: RewardChainConfig = field(default_factory=RewardChainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _build_section(name: str, cls, data: dict) -> Any:
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ValidationError(f"{name}.{key}", "unknown key")
    kwargs = {}
    for key, value in data.items():
        if (name, key) in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ValidationError(name, str(exc)) from exc


def config_from_dict(data: Optional[dict]) -> PipelineConfig:
    data = dict(data or {})
    known = set(_SECTIONS) | {"seed"}
    for key in data:
        if key not in known:
            raise ValidationError(key, "unknown key")
    seed = data.pop("seed", 0)
    if not isinstance(seed, int):
        raise ValidationError("seed", "must be an integer")
    sections = {}
    for name, cls in _SECTIONS.items():
        raw = data.get(name, {})
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ValidationError(name, "must be a mapping")
        sections[name] = _build_section(name, cls, raw)
    return PipelineConfig(seed=seed, **sections)


def config_to_dict(cfg: PipelineConfig) -> dict:
    data = dataclasses.asdict(cfg)
    for section, key in _TUPLE_FIELDS:
        data[section][key] = list(data[section][key])
    return data


def load_config(path: str) -> PipelineConfig:
    """Load a YAML (or JSON) config file; an empty file means all defaults."""
    try:
        with open(path) as fp:
            raw = yaml.safe_load(fp)
    except OSError as exc:
        raise ParseError(f"cannot read config {path!r}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ParseError(f"malformed config {path!r}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ParseError(f"config {path!r} must contain a mapping")
    return config_from_dict(raw)


def save_config(cfg: PipelineConfig, path: str) -> None:
    with open(path, "w") as fp:
        yaml.safe_dump(config_to_dict(cfg), fp, sort_keys=False)
