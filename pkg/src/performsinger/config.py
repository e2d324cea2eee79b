"""Run configuration: nested dataclasses, JSON load/save, dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class AudioConfig:
    sample_rate: int = 48000
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 24000.0
    log_floor: float = 1e-5
    f0_min: float = 60.0
    f0_max: float = 1200.0
    f0_window: float = 0.040
    f0_threshold: float = 0.3


@dataclass
class ModelConfig:
    hidden: int = 256
    encoder_layers: int = 4
    encoder_heads: int = 2
    encoder_kernel: int = 9
    encoder_filter: int = 512
    dropout: float = 0.1
    speaker_layers: int = 2
    speaker_hidden: int = 256
    speaker_crop: int = 64  # reference frames seen per training step; 0 = whole clip


@dataclass
class VideoConfig:
    fps: float = 25.0
    size: int = 48
    channels: int = 16


@dataclass
class VCFMConfig:
    blocks: int = 2
    heads: int = 2
    zero_init: bool = True


@dataclass
class DurationConfig:
    kernel: int = 3
    dropout: float = 0.1


@dataclass
class PitchConfig:
    steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.06
    channels: int = 64
    layers: int = 4
    uv_threshold: float = 0.5
    std_floor: float = 0.05
    target: str = "x0"  # denoiser output: "x0" or "eps"
    x0_tolerance: float = 0.05


@dataclass
class RVQConfig:
    books: int = 4
    entries: int = 64
    beta: float = 0.25


@dataclass
class StyleConfig:
    enabled: bool = True
    pool: int = 4
    heads: int = 2


@dataclass
class DecoderConfig:
    layers: int = 20
    channels: int = 64
    dilation_cycle: int = 4
    steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.06
    mel_min: float = -11.512925464970229  # log(1e-5)
    mel_max: float = 5.0
    f0_condition: bool = True
    target: str = "x0"  # denoiser output: "x0" or "eps"
    x0_tolerance: float = 0.01  # assumed rms error of the clean estimate (normalized units)
    data_rms: float = 0.4  # rms of normalized log-mel, for input scaling


@dataclass
class LossConfig:
    lambda_r: float = 1.0
    lambda_d: float = 1.0
    lambda_p: float = 1.0
    lambda_c: float = 1.0


@dataclass
class TrainConfig:
    strategy: str = "two_stage"  # baseline | single | two_stage
    stage1_steps: int = 3000
    stage2_steps: int = 1000
    single_steps: int = 3000
    batch_size: int = 4
    lr: float = 2e-3
    warmup: int = 400
    t_sampling: str = "weighted"  # uniform | weighted (importance-sampled diffusion steps)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 1.0
    stage2_finetune_scale: float = 0.1
    stage2_full_freeze: bool = False
    log_every: int = 1
    checkpoint_every: int = 0


@dataclass
class RunConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    video: VideoConfig = field(default_factory=VideoConfig)
    vcfm: VCFMConfig = field(default_factory=VCFMConfig)
    dur: DurationConfig = field(default_factory=DurationConfig)
    pitch: PitchConfig = field(default_factory=PitchConfig)
    rvq: RVQConfig = field(default_factory=RVQConfig)
    style: StyleConfig = field(default_factory=StyleConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> "RunConfig":
        if self.model.hidden % self.model.encoder_heads:
            raise ConfigError("model.hidden must be divisible by model.encoder_heads")
        if self.model.hidden % self.vcfm.heads or self.model.hidden % self.style.heads:
            raise ConfigError("model.hidden must be divisible by attention head counts")
        if self.vcfm.blocks < 0:
            raise ConfigError("vcfm.blocks must be >= 0")
        if self.rvq.books < 1 or self.rvq.entries < 1:
            raise ConfigError("rvq.books and rvq.entries must be >= 1")
        if self.train.strategy not in ("baseline", "single", "two_stage"):
            raise ConfigError(f"unknown train.strategy {self.train.strategy!r}")
        if self.train.t_sampling not in ("uniform", "weighted"):
            raise ConfigError(f"unknown train.t_sampling {self.train.t_sampling!r}")
        for name in ("lambda_r", "lambda_d", "lambda_p", "lambda_c"):
            if getattr(self.loss, name) < 0:
                raise ConfigError(f"loss.{name} must be non-negative")
        for name, section in (("decoder", self.decoder), ("pitch", self.pitch)):
            if section.target not in ("x0", "eps"):
                raise ConfigError(f"{name}.target must be 'x0' or 'eps'")
            if section.x0_tolerance <= 0:
                raise ConfigError(f"{name}.x0_tolerance must be positive")
        if self.audio.n_mels != 80:
            raise ConfigError("audio.n_mels is fixed at 80")
        return self

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _build(cls, data: dict, prefix: str = ""):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {prefix}{key}")
        f = known[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix}{key} must be an object")
            kwargs[key] = _build(type(default), value, f"{prefix}{key}.")
        else:
            kwargs[key] = _coerce(value, default, f"{prefix}{key}")
    return cls(**kwargs)


def _coerce(value: Any, default: Any, name: str) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{name} expects a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} expects {type(default).__name__}, got {value!r}") from None
    return str(value)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data).validate()


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = json.loads(Path(path).read_text()) if path else {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(value)
    return from_dict(data)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def describe_keys() -> list[tuple[str, Any]]:
    """Flattened (dotted key, default) pairs for every config field."""
    out: list[tuple[str, Any]] = []

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                walk(value, f"{prefix}{f.name}.")
            else:
                out.append((f"{prefix}{f.name}", value))

    walk(RunConfig(), "")
    return out
