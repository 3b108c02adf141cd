"""Run configuration and its flat ``key=value`` text form.

Nested sections use dotted keys (``vit.depth=6``, ``aug.mode=weak``); the
same keys are accepted as command-line overrides.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import MODES, VARIANTS, AugmentConfig
from .model import ViTConfig
from .rng import ConfigError, SparsitySchedule, fnv1a64


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | cifar10 | dlma
    path: str = ""
    synth_seed: int = 0
    n_per_class: int = 500
    n_classes: int = 10
    test_per_class: int = 100
    noise: float = 0.03
    motif: int = 2

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10", "dlma"):
            raise ConfigError(f"unknown data source '{self.source}'")


@dataclass
class TrainConfig:
    master_seed: int = 0
    epochs: int = 20
    base_batch: int = 32
    lr_base: float = 5e-4
    weight_decay: float = 0.05
    warmup_epochs: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tau: float = 0.2
    lambda_dilemma: float = 0.4
    theta: float = 0.2
    schedule: SparsitySchedule = field(default_factory=SparsitySchedule)
    mode: str = "teacher-student"
    loss_variant: str = "dilemma"
    symmetric: bool = True
    ema_momentum_base: float = 0.99
    checkpoint_every: int = 0
    debug: bool = False
    vit: ViTConfig = field(default_factory=ViTConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr_base <= 0:
            raise ConfigError("lr_base must be > 0")
        if self.base_batch < 2:
            raise ConfigError("base_batch must be >= 2")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode '{self.mode}'")
        if self.loss_variant not in VARIANTS:
            raise ConfigError(f"unknown loss_variant '{self.loss_variant}'")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("theta must lie in [0, 1]")
        if self.lambda_dilemma < 0:
            raise ConfigError("lambda_dilemma must be >= 0")
        if not 0.0 < self.ema_momentum_base <= 1.0:
            raise ConfigError("ema_momentum_base must lie in (0, 1]")
        expected_aux = self.vit.n_positions if self.loss_variant in ("pos_correction", "partial_jigsaw") else 1
        if self.vit.aux_outputs != expected_aux:
            self.vit = dataclasses.replace(self.vit, aux_outputs=expected_aux)
        if self.aug.input_size != self.vit.image_size:
            self.aug = dataclasses.replace(self.aug, input_size=self.vit.image_size)

    # -- flat text form ---------------------------------------------------------
    def to_flat(self) -> dict[str, str]:
        return _flatten(self)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_flat().items())

    def digest(self) -> int:
        return fnv1a64(self.to_text().encode("utf-8"))

    @classmethod
    def from_flat(cls, values: dict[str, str]) -> "TrainConfig":
        return _build(cls, values, "")

    @classmethod
    def from_text(cls, text: str, overrides: dict[str, str] | None = None) -> "TrainConfig":
        values = parse_config_text(text)
        values.update(overrides or {})
        return cls.from_flat(values)

    @classmethod
    def from_file(cls, path, overrides: dict[str, str] | None = None) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), overrides)

    def with_overrides(self, overrides: dict[str, str]) -> "TrainConfig":
        values = self.to_flat()
        values.update(overrides)
        return TrainConfig.from_flat(values)


def parse_config_text(text: str) -> dict[str, str]:
    """``key=value`` per line; ``#`` starts a comment; blank lines ignored."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got '{line}'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, SparsitySchedule):
        return value.to_text()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flatten(obj, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value) and not isinstance(value, SparsitySchedule):
            out.update(_flatten(value, key + "."))
        else:
            out[key] = _format(value)
    return out


def _parse_value(key: str, text: str, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, SparsitySchedule):
            return SparsitySchedule.from_text(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {text!r}") from exc


def _build(cls, values: dict[str, str], prefix: str):
    template = cls()
    known = {}
    for f in dataclasses.fields(cls):
        default = getattr(template, f.name)
        if dataclasses.is_dataclass(default) and not isinstance(default, SparsitySchedule):
            known[f.name] = _build(type(default), values, prefix + f.name + ".")
        elif prefix + f.name in values:
            known[f.name] = _parse_value(prefix + f.name, values[prefix + f.name], default)
    if not prefix:
        allowed = set(_flatten(template))
        unknown = sorted(set(values) - allowed)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        return cls(**known)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
