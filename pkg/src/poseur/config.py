"""Flat TOML run configuration.

Every key lives at the top level of the file. Unknown keys and wrongly
typed values are rejected before any work starts, and command-line flags
override whatever the file sets.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .errors import ConfigurationError
from .model import ModelConfig
from .synth import SynthConfig

_MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig))


@dataclass
class RunConfig:
    # model
    input_size: tuple = (64, 64)
    num_keypoints: int = 8
    channels: list = field(default_factory=lambda: [16, 32])
    strides: list = field(default_factory=lambda: [8, 16])
    embed_dim: int = 32
    decoder_layers: int = 2
    heads: int = 4
    points: int = 4
    decoder_levels: int | None = None
    ffn_dim: int | None = None
    mode: str = "flow"
    flow_depth: int = 4
    flow_hidden: int = 16
    noisy_references: bool = True
    aux_loss: bool = True
    lam: float = 1.0
    # scoring
    score_a: float = 0.2
    # optimizer and schedule
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    offset_lr_mult: float = 0.1
    milestones: list = field(default_factory=lambda: [0.6, 0.85])
    decay_factor: float = 0.1
    batch_size: int = 16
    steps: int = 3000
    log_every: int = 100
    # data
    seed: int = 0
    num_scenes: int = 32
    image_size: tuple = (64, 64)
    figures_per_image: int = 1
    bbox_expand: float = 1.0
    data_dir: str | None = None
    val_dir: str | None = None
    out_dir: str = "runs/default"
    checkpoint: str | None = None

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.image_size = tuple(int(v) for v in self.image_size)
        self.channels = [int(v) for v in self.channels]
        self.strides = [int(v) for v in self.strides]
        self.milestones = [float(v) for v in self.milestones]
        for name in ("batch_size", "steps", "log_every", "num_scenes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("lr", "adam_eps", "score_a", "bbox_expand", "offset_lr_mult", "decay_factor"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("beta1 and beta2 must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if any(not 0 < m < 1 for m in self.milestones) or self.milestones != sorted(self.milestones):
            raise ConfigurationError("milestones must be increasing fractions in (0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        # building the sub-configs runs their own validation
        self.model_config()
        self.synth_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in _MODEL_KEYS})

    def synth_config(self) -> SynthConfig:
        return SynthConfig(self.num_keypoints, self.image_size, self.figures_per_image)

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["input_size"] = list(self.input_size)
        out["image_size"] = list(self.image_size)
        return out

    def replace(self, **overrides):
        return from_mapping({**self.to_dict(), **overrides})


def _check_type(name, value, default):
    if value is None or default is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, tuple))
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigurationError(f"config key {name!r}: expected {type(default).__name__}, got {value!r}")


def from_mapping(values) -> RunConfig:
    known = {f.name: f for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    defaults = RunConfig()
    for name, value in values.items():
        _check_type(name, value, getattr(defaults, name))
    return RunConfig(**values)


def load_config(path=None, **overrides) -> RunConfig:
    """Read ``path`` (TOML) if given, then apply non-``None`` ``overrides``."""
    values = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        nested = [k for k, v in values.items() if isinstance(v, dict)]
        if nested:
            raise ConfigurationError(f"config must be flat; found tables {nested}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return from_mapping(values)
