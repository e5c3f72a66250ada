"""Model and training configuration with desk-scale defaults."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import List, Tuple

from .errors import ConfigError

#: (lambda_attribute, lambda_geometry) operating points, highest rate first.
RATE_POINTS: List[Tuple[float, float]] = [
    (0.03, 7.2),
    (0.0195, 1.625),
    (0.013975, 0.7525),
    (0.0085, 0.75),
    (0.0032, 0.36),
    (0.00135, 0.225),
]

#: Attribute-only stage uses a single lambda.
STAGE1_LAMBDA_A = 0.05


@dataclass
class ModelConfig:
    """Architecture hyperparameters; checkpoints must match these widths."""

    channels: Tuple[int, int, int] = (32, 64, 96)
    state_dim: int = 16
    group_sizes: Tuple[int, int, int] = (1024, 512, 256)
    mem_group_size: int = 16
    mem_width: int = 48
    coord_features: bool = True
    model_id: int = 0

    def validate(self):
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ConfigError(f"channels must be three positive widths, got {self.channels}")
        if len(self.group_sizes) != 3 or any(m < 1 for m in self.group_sizes):
            raise ConfigError(f"group_sizes must be three positive sizes, got {self.group_sizes}")
        if not 0 <= self.model_id < len(RATE_POINTS):
            raise ConfigError(f"model_id {self.model_id} outside [0, {len(RATE_POINTS)})")
        return self


@dataclass
class TrainConfig:
    """Two-stage training settings.

    The learning-rate schedule is lr(epoch) = max(lr_initial *
    0.5^(epoch // lr_halve_every), lr_floor).
    """

    stage: str = "attribute_only"  # or "joint"
    lambda_a: float = STAGE1_LAMBDA_A
    lambda_g: float = RATE_POINTS[0][1]
    lr_initial: float = 4e-5
    lr_halve_every: int = 20
    lr_floor: float = 5e-6
    batch_size: int = 1
    gt_geometry_epochs: int = 20
    epochs: int = 4
    seed: int = 0
    max_grad_norm: float = 10.0

    def validate(self):
        if self.stage not in ("attribute_only", "joint"):
            raise ConfigError(f"stage must be attribute_only or joint, got {self.stage!r}")
        if self.lambda_a <= 0:
            raise ConfigError("lambda_a must be positive")
        if self.stage == "joint" and self.lambda_g <= 0:
            raise ConfigError("lambda_g must be positive in the joint stage")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        return self

    def lr_at(self, epoch: int) -> float:
        return max(self.lr_initial * 0.5 ** (epoch // self.lr_halve_every), self.lr_floor)


def _coerce(value: str, target):
    if isinstance(target, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        parts = [p for p in value.replace(",", " ").split() if p]
        return tuple(type(target[0])(p) for p in parts)
    return value


def parse_config_file(path) -> dict:
    """Parse a `key = value` text file; '#' starts a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def apply_config(cfg, overrides: dict):
    """Apply string overrides onto a dataclass config, coercing types."""
    valid = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for key, value in overrides.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(value, valid[key]))
    return cfg.validate()
