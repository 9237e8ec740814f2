"""Structured configuration for the whole pipeline, YAML in and out.

One document covers encoder, fusion/prompter, region proposer, decoder,
and training sections. Unknown keys are rejected rather than ignored so
typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..encoder import EncoderConfig
from ..prompter import PrompterConfig


class ConfigError(ValueError):
    """Configuration file is malformed or inconsistent."""


@dataclass(frozen=True)
class RpnConfig:
    anchor_sides: tuple[tuple[float, ...], ...] = ((26.0,), (18.0,), (12.0,))
    positive_iou: float = 0.7
    negative_iou: float = 0.3
    sample_size: int = 64
    positive_fraction: float = 0.5
    pre_nms_top_k: int = 200
    nms_iou: float = 0.5
    score_threshold: float = 0.05
    max_detections: int = 100

    def __post_init__(self):
        if not 0 <= self.negative_iou <= self.positive_iou <= 1:
            raise ConfigError("need 0 <= negative_iou <= positive_iou <= 1")
        if self.sample_size < 1 or not 0 < self.positive_fraction <= 1:
            raise ConfigError("bad anchor sampling parameters")


@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 64
    heads: int = 2
    mask_size: int = 32

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError("decoder dim must divide evenly across heads")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adamw"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class PipelineConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompter: PrompterConfig = field(default_factory=PrompterConfig)
    rpn: RpnConfig = field(default_factory=RpnConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    num_classes: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.prompter.prompt_dim != self.decoder.dim:
            raise ConfigError(
                f"prompt token dim {self.prompter.prompt_dim} must equal "
                f"decoder dim {self.decoder.dim}"
            )
        if self.prompter.in_channels != self.encoder.dim:
            raise ConfigError(
                f"prompter expects {self.prompter.in_channels} channels but the "
                f"encoder emits {self.encoder.dim}"
            )
        expected_levels = len(
            range(self.encoder.adapt_start, self.encoder.depth + 1, self.encoder.adapt_stride)
        )
        if self.prompter.levels != expected_levels:
            raise ConfigError(
                f"prompter.levels {self.prompter.levels} != encoder adapted-block "
                f"count {expected_levels}"
            )
        if len(self.rpn.anchor_sides) != 3:
            raise ConfigError("anchor_sides must list one tuple per pyramid level")


_SECTIONS = {
    "encoder": EncoderConfig,
    "prompter": PrompterConfig,
    "rpn": RpnConfig,
    "decoder": DecoderConfig,
    "train": TrainConfig,
}


def _build_section(cls, payload, section):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    coerced = dict(payload)
    # yaml lists arrive as lists; tuple-typed fields need tuples
    for f in dataclasses.fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(
                tuple(v) if isinstance(v, list) else v for v in coerced[f.name]
            )
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {section!r} section: {exc}") from exc


def config_from_dict(payload: dict) -> PipelineConfig:
    if not isinstance(payload, dict):
        raise ConfigError("top-level config must be a mapping")
    top_names = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(payload) - top_names
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for section, cls in _SECTIONS.items():
        if section in payload:
            kwargs[section] = _build_section(cls, payload[section], section)
    for scalar in ("num_classes", "seed"):
        if scalar in payload:
            kwargs[scalar] = payload[scalar]
    try:
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    text = Path(path).read_text()
    try:
        payload = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if payload is None:
        payload = {}
    return config_from_dict(payload)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=True))
