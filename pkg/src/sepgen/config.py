"""Configuration dataclasses and YAML loading.

A single YAML file covers every section; unknown keys are rejected so typos
surface immediately. Defaults follow the reference training recipe
(16 kHz / 8 s audio, 6 sources, AdamW 0.9/0.999 with weight decay 1e-2,
stage-1 lr 1e-3 for 10 epochs, stage-2 lr 1e-4 for 15 epochs).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class DspConfig:
    sample_rate: int = 16000
    duration_s: float = 8.0
    frame_length: int = 1024
    hop: int = 256
    window: str = "hann"

    @property
    def num_samples(self) -> int:
        return int(round(self.sample_rate * self.duration_s))


@dataclass
class SeparatorConfig:
    num_sources: int = 6
    encoder_in_channels: tuple[int, ...] = (64, 64, 128, 256, 512)
    decoder_out_channels: tuple[int, ...] = (1024, 512, 256, 128, 128)
    se_reduction: int = 16

    def validate(self) -> None:
        if self.num_sources < 2:
            raise ConfigError("num_sources must be at least 2")
        if len(self.encoder_in_channels) != len(self.decoder_out_channels):
            raise ConfigError("encoder and decoder channel lists must have equal length")


@dataclass
class LossConfig:
    epsilon_sisdr: float = 1e-8
    epsilon_rank: float = 1e-3
    tau: float = 1e-2
    tau_prime_init: float = 0.07
    schedule: str = "linear"


@dataclass
class EmbedConfig:
    backend: str = "toy"  # "toy" or "external"
    dimension: int = 512
    checkpoint: str | None = None
    seed: int = 0
    mel_bands: int = 32
    frame_length: int = 256
    hop: int = 128


@dataclass
class AdapterConfig:
    cond_dim: int = 128  # conditioning dimension fed to cross-attention
    heads: int = 4
    latent_channels: int = 4
    latent_size: int = 8
    image_size: int = 32
    base_channels: int = 32
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sample_steps: int = 25
    guidance: float = 7.5
    uncond_prob: float = 0.1


@dataclass
class TrainStageConfig:
    epochs: int
    learning_rate: float
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    holdout_fraction: float = 0.2


@dataclass
class PretrainConfig:
    autoencoder_steps: int = 1200
    autoencoder_lr: float = 2e-3
    denoiser_steps: int = 2500
    denoiser_lr: float = 1e-3
    batch_size: int = 16


@dataclass
class PipelineConfig:
    seed: int = 0
    dsp: DspConfig = field(default_factory=DspConfig)
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    stage1: TrainStageConfig = field(
        default_factory=lambda: TrainStageConfig(epochs=10, learning_rate=1e-3)
    )
    stage2: TrainStageConfig = field(
        default_factory=lambda: TrainStageConfig(epochs=15, learning_rate=1e-4)
    )
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)


def _apply(obj, section: str, values: dict):
    valid = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {section}.{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _apply(current, f"{section}.{key}", value)
        elif isinstance(current, tuple) and isinstance(value, (list, tuple)):
            setattr(obj, key, tuple(value))
        else:
            setattr(obj, key, value)


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    for section, values in (data or {}).items():
        if not hasattr(cfg, section):
            raise ConfigError(f"unknown config section {section!r}")
        target = getattr(cfg, section)
        if dataclasses.is_dataclass(target) and isinstance(values, dict):
            _apply(target, section, values)
        else:
            setattr(cfg, section, values)
    cfg.separator.validate()
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    """Build a config from a YAML file, or defaults when `path` is None."""
    if path is None:
        return PipelineConfig()
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return config_from_dict(data)


def toy_config(seed: int = 0) -> PipelineConfig:
    """Desk-scale settings used by the synthetic-corpus harness and tests."""
    cfg = PipelineConfig(seed=seed)
    cfg.dsp = DspConfig(sample_rate=2000, duration_s=2.0, frame_length=128, hop=32)
    cfg.separator = SeparatorConfig(
        num_sources=6,
        encoder_in_channels=(4, 4, 8, 16, 32),
        decoder_out_channels=(64, 32, 16, 8, 8),
        se_reduction=4,
    )
    cfg.embed = EmbedConfig(dimension=64, seed=seed, mel_bands=32, frame_length=128, hop=64)
    cfg.adapter = AdapterConfig(cond_dim=32, heads=4, base_channels=16)
    return cfg
