"""Training configuration and its ``key = value`` file format.

Grammar: one ``key = value`` pair per line, UTF-8. Blank lines and lines whose
first non-space character is ``#`` are ignored. Booleans are ``true``/``false``,
integer lists are comma separated. Unknown keys, repeated keys and malformed
lines are errors that carry the line number.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .augment import PRESETS, AugmentationSpec, TemporalSpec, preset
from .losses import MODES
from .model import BN_CHOICES, INPUT_NORMS, EncoderSpec, HeadSpec, NetworkSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # objective
    lam: float = 0.5
    tau: float = 0.1
    tau_m: float = 0.07
    relational_mode: str = "strict"
    symmetrize: bool = True
    # optimisation
    lr_init: float = 0.06
    lr_scaling: str = "linear"  # linear: lr_init·batch/256, none: lr_init as is
    warmup_epochs: int = 5
    total_epochs: int = 50
    batch_size: int = 128
    weight_decay: float = 5e-4
    momentum_init: float = 0.996
    queue_size: int = 1024
    seed: int = 0
    checkpoint_every: int = 0
    # augmentation
    online_aug: str = "strong-alpha"
    target_aug: str = "strong-beta"
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    color_strength: float = 0.5
    clip_duration_s: float = 1.0
    frames_per_clip: int = 8
    jitter_factor: float = 0.0
    reverse_prob: float = 0.0
    rgb_diff_prob: float = 0.0
    # network
    encoder: str = "cnn"
    encoder_widths: tuple[int, ...] = (512, 256)
    encoder_channels: tuple[int, ...] = (32, 64)
    encoder_strides: tuple[int, ...] = (2, 2)
    input_norm: str = "standardize"
    projector_layers: int = 2
    projector_hidden: int = 128
    projector_out: int = 64
    projector_bn: str = "hidden"
    predictor: bool = False
    predictor_hidden: int = 128

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.tau <= 0 or self.tau_m <= 0:
            raise ConfigError("tau and tau_m must be > 0")
        if self.relational_mode not in MODES:
            raise ConfigError(f"relational_mode must be one of {MODES}")
        if self.lr_scaling not in ("linear", "none"):
            raise ConfigError("lr_scaling must be 'linear' or 'none'")
        if self.batch_size < 1 or self.total_epochs < 1:
            raise ConfigError("batch_size and total_epochs must be >= 1")
        if self.queue_size < self.batch_size:
            raise ConfigError(f"queue_size ({self.queue_size}) must be >= batch_size ({self.batch_size})")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError("warmup_epochs must lie in [0, total_epochs]")
        if not 0.0 <= self.momentum_init <= 1.0:
            raise ConfigError("momentum_init must lie in [0, 1]")
        if self.lr_init < 0 or self.weight_decay < 0:
            raise ConfigError("lr_init and weight_decay must be >= 0")
        for name in (self.online_aug, self.target_aug):
            if name not in PRESETS:
                raise ConfigError(f"unknown augmentation preset {name!r}; choose from {sorted(PRESETS)}")
        if not 0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            raise ConfigError("crop scale range must satisfy 0 < min <= max <= 1")
        if self.encoder not in ("mlp", "cnn"):
            raise ConfigError("encoder must be 'mlp' or 'cnn'")
        if self.encoder == "cnn" and (not self.encoder_channels
                                      or len(self.encoder_channels) != len(self.encoder_strides)):
            raise ConfigError("cnn encoder needs as many encoder_strides as encoder_channels")
        if self.input_norm not in INPUT_NORMS:
            raise ConfigError(f"input_norm must be one of {INPUT_NORMS}")
        if self.projector_bn not in BN_CHOICES:
            raise ConfigError(f"projector_bn must be one of {BN_CHOICES}")
        try:
            self.temporal_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def base_lr(self) -> float:
        return self.lr_init * self.batch_size / 256 if self.lr_scaling == "linear" else self.lr_init

    def augmentation(self, branch: str) -> AugmentationSpec:
        name = self.online_aug if branch == "online" else self.target_aug
        spec = preset(name, (self.crop_scale_min, self.crop_scale_max))
        return spec if self.color_strength == 0.5 else spec.with_color_strength(self.color_strength)

    def temporal_spec(self) -> TemporalSpec:
        return TemporalSpec(self.clip_duration_s, self.frames_per_clip, self.jitter_factor,
                            self.reverse_prob, self.rgb_diff_prob)

    def network_spec(self, input_shape: tuple[int, ...]) -> NetworkSpec:
        enc = EncoderSpec(self.encoder, tuple(input_shape), tuple(self.encoder_widths),
                          tuple(self.encoder_channels), tuple(self.encoder_strides), self.input_norm)
        proj = HeadSpec(self.projector_layers, self.projector_hidden, self.projector_out, self.projector_bn)
        pred = HeadSpec(2, self.predictor_hidden, self.projector_out, "hidden") if self.predictor else None
        return NetworkSpec(enc, proj, pred)


# file keys differ from attribute names only for lambda (a Python keyword)
_KEY_TO_ATTR = {"lambda": "lam"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_TO_ATTR.items()}
_FIELDS = {f.name: f for f in fields(TrainConfig)}
_DEFAULTS = TrainConfig()


def config_keys() -> list[str]:
    return [_ATTR_TO_KEY.get(name, name) for name in _FIELDS]


def _convert(attr: str, text: str):
    default = getattr(_DEFAULTS, attr)
    if isinstance(default, bool):
        low = text.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true or false, got {text!r}")
        return low == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(p) for p in text.split(",") if p.strip())
    return text


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    values: dict[str, object] = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        attr = _KEY_TO_ATTR.get(key, key)
        if attr not in _FIELDS or key == "lam":
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first on line {seen[key]})")
        seen[key] = lineno
        try:
            values[attr] = _convert(attr, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    try:
        return TrainConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def parse_config(path) -> TrainConfig:
    """Read a config file; ``SCE_SEED`` in the environment overrides ``seed``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config_text(text, str(path))
    env_seed = os.environ.get("SCE_SEED")
    if env_seed is not None:
        try:
            cfg = replace(cfg, seed=int(env_seed))
        except ValueError as exc:
            raise ConfigError(f"SCE_SEED must be an integer, got {env_seed!r}") from exc
    return cfg


def serialize_config(cfg: TrainConfig) -> str:
    lines = [f"{_ATTR_TO_KEY.get(name, name)} = {_format(getattr(cfg, name))}" for name in _FIELDS]
    return "\n".join(lines) + "\n"


def with_value(cfg: TrainConfig, key: str, value) -> TrainConfig:
    """Copy of ``cfg`` with one file-level key replaced (value may be a string)."""
    attr = _KEY_TO_ATTR.get(key, key)
    if attr not in _FIELDS:
        raise ConfigError(f"unknown key {key!r}")
    if isinstance(value, str):
        value = _convert(attr, value)
    return replace(cfg, **{attr: value})
