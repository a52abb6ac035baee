"""Configuration dataclasses for every pipeline stage.

All values the underlying method leaves unstated (frame geometry, DP
constants, desk-scale sizes) live here so experiments can override them.
Dict round-trips reject unknown keys, so stale config files fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from voicefilter.errors import DataError


@dataclass(frozen=True)
class AnalysisConfig:
    """STFT / mel-filterbank geometry (16 kHz, 12.5 ms hop by default)."""

    fft_size: int = 1024
    window_size: int = 800
    hop_length: int = 200
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: float | None = None  # None = Nyquist at analysis time
    log_floor: float = 1e-5  # applied to mel power before ln

    def __post_init__(self) -> None:
        if self.window_size > self.fft_size:
            raise DataError("window_size must be <= fft_size")
        if self.hop_length > self.window_size:
            raise DataError("hop_length must be <= window_size")
        if self.hop_length < 1:
            raise DataError("hop_length must be >= 1")
        if self.mel_bins < 1:
            raise DataError("mel_bins must be >= 1")
        if self.log_floor <= 0:
            raise DataError("log_floor must be > 0")

    def fmax_hz(self, sample_rate: int) -> float:
        return self.fmax if self.fmax is not None else sample_rate / 2.0


@dataclass(frozen=True)
class PitchConfig:
    """Pitch tracker and f0-from-mel tuning knobs.

    The dynamic-programming constants smooth the lag path: ``octave_lambda``
    scales |delta log f0| between adjacent voiced frames, ``uv_switch_cost``
    is charged at voiced/unvoiced boundaries, and ``octave_bias`` penalizes
    longer lags so subharmonics lose ties (the octave-error guard).
    """

    f0_min: float = 70.0
    f0_max: float = 500.0
    octave_lambda: float = 0.35
    uv_switch_cost: float = 0.2
    octave_bias: float = 0.01
    n_candidates: int = 8
    window_periods: float = 2.0  # NCCF window, in periods of f0_min
    comb_threshold: float = 0.05  # voicing threshold for mel-domain comb scores
    comb_harmonics: int = 10
    comb_steps_per_octave: int = 24


@dataclass(frozen=True)
class ModelConfig:
    """Sizes of the conversion network; defaults are full scale, tests shrink."""

    channels: int = 512
    kernel_size: int = 5
    conv_layers: int = 6
    cond_after_layer: int = 3
    embed_dim: int = 256
    lstm_hidden: int = 512
    dense_units: int = 1024
    mel_bins: int = 80
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        if not 1 <= self.cond_after_layer < self.conv_layers:
            raise DataError("cond_after_layer must lie strictly inside the conv stack")
        if self.kernel_size % 2 != 1:
            raise DataError("kernel_size must be odd for size-preserving padding")


@dataclass(frozen=True)
class EmbedderConfig:
    """Sizes of the mel -> speaker-embedding network."""

    channels: int = 64
    kernel_size: int = 3
    embed_dim: int = 256
    mel_bins: int = 80


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000  # desk-scale background default
    finetune_steps: int = 1000
    batch_size: int = 4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    grad_clip: float = 5.0  # global norm; <= 0 disables

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise DataError("steps and batch_size must be positive")
        if self.finetune_steps < 0:
            raise DataError("finetune_steps must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise DataError("adam betas must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be > 0")


@dataclass(frozen=True)
class EvalConfig:
    shrinkage: float = 1e-3  # diagonal loading for small-sample covariance fits
    pooled: bool = False  # pool speakers instead of averaging per-speaker distances
    alpha: float = 0.05


@dataclass(frozen=True)
class PipelineConfig:
    """Top-level config consumed by the CLI; sections mirror the stages."""

    seed: int = 0
    threads: int = 1
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    pitch: PitchConfig = field(default_factory=PitchConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTION_TYPES = {
    "analysis": AnalysisConfig,
    "pitch": PitchConfig,
    "model": ModelConfig,
    "embedder": EmbedderConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _dataclass_from_dict(cls: type, data: dict[str, Any], context: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise DataError(f"unknown config key(s) in {context}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict[str, Any]) -> PipelineConfig:
    """Build a PipelineConfig from a plain dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise DataError("config root must be a JSON object")
    top = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(data) - top
    if unknown:
        raise DataError(f"unknown config key(s): {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise DataError(f"config section {key!r} must be an object")
            kwargs[key] = _dataclass_from_dict(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    return PipelineConfig(**kwargs)


def config_to_dict(cfg: PipelineConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"config file is not valid JSON: {exc}") from None
    return config_from_dict(data)
