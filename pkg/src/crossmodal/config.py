"""Experiment configuration and its flat ``key = value`` file format.

Example file::

    # transformer comparison
    backbone = transformer
    variant = CM-C
    lr = 0.0002
    seeds = 0, 1, 2, 3, 4

Blank lines and ``#`` comments are ignored.  Tuple-valued keys take
comma-separated values.  Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .layers import FusionVariant

BACKBONES = ("rnn", "transformer", "netvlad")
VARIANTS = tuple(v.value for v in FusionVariant)

# keys that change parameter shapes or the forward computation
ARCH_KEYS = (
    "backbone", "variant", "rnn_hidden", "heads", "head_dim", "clusters_video",
    "clusters_audio", "head_hidden", "gate_threshold", "tower_hidden",
)


@dataclass
class ExperimentConfig:
    backbone: str = "transformer"
    variant: str = "CM-C"
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 10
    sched_factor: float = 0.1
    sched_patience: int = 2
    seeds: tuple = (0, 1, 2, 3, 4)
    rnn_hidden: int = 16
    heads: int = 2
    head_dim: int = 8
    clusters_video: int = 8
    clusters_audio: int = 4
    head_hidden: int = 32
    gate_threshold: float = 0.5
    w_neg: float = 2.0
    tower_hidden: tuple = (32, 16)
    tower_lr: float = 3e-3
    tower_epochs: int = 5
    top_k: int = 20
    eval_resamples: int = 5
    resample_fraction: float = 0.8

    def validate(self) -> "ExperimentConfig":
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not self.tower_lr > 0:
            raise ConfigError(f"tower_lr must be positive, got {self.tower_lr}")
        if self.sched_patience < 1:
            raise ConfigError(f"sched_patience must be >= 1, got {self.sched_patience}")
        if not 0.0 < self.sched_factor < 1.0:
            raise ConfigError(f"sched_factor must lie in (0, 1), got {self.sched_factor}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0):
            raise ConfigError("Adam needs beta1, beta2 in [0, 1) and eps > 0")
        if not 0.0 < self.gate_threshold < 1.0:
            raise ConfigError(f"gate_threshold must lie in (0, 1), got {self.gate_threshold}")
        if self.w_neg <= 0:
            raise ConfigError(f"w_neg must be positive, got {self.w_neg}")
        if not 0.0 < self.resample_fraction <= 1.0:
            raise ConfigError(f"resample_fraction must lie in (0, 1], got {self.resample_fraction}")
        for name in ("batch_size", "max_epochs", "rnn_hidden", "heads", "head_dim", "clusters_video",
                     "clusters_audio", "head_hidden", "tower_epochs", "top_k"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.eval_resamples < 0:
            raise ConfigError("eval_resamples cannot be negative")
        if len(self.tower_hidden) != 2 or min(self.tower_hidden) < 1:
            raise ConfigError(f"tower_hidden needs two positive widths, got {self.tower_hidden}")
        return self

    @property
    def fusion(self) -> FusionVariant:
        return FusionVariant(self.variant)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def arch_dict(self) -> dict:
        d = self.to_dict()
        return {k: d[k] for k in ARCH_KEYS}

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k} = {', '.join(map(str, v)) if isinstance(v, list) else v}")
        return "\n".join(lines) + "\n"


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def coerce_value(cls, key: str, raw):
    """Convert ``raw`` (string or python value) to the type of ``cls.key``."""
    types = _field_types(cls)
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    t = types[key]
    default = next(f.default for f in fields(cls) if f.name == key)
    try:
        if t is tuple or isinstance(default, tuple):
            if isinstance(raw, str):
                items = [s.strip() for s in raw.split(",") if s.strip()]
            else:
                items = list(raw)
            elem = type(default[0]) if default else str
            return tuple(elem(x) for x in items)
        if t is bool:
            if isinstance(raw, str):
                if raw.lower() in ("1", "true", "yes", "on"):
                    return True
                if raw.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            return bool(raw)
        if t is int:
            return int(raw)
        if t is float:
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_kv_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def build_config(cls, file_values: dict | None = None, overrides: dict | None = None):
    """Defaults, then file values, then explicit overrides (e.g. CLI flags)."""
    kwargs = {}
    for src in (file_values or {}, overrides or {}):
        for key, raw in src.items():
            if raw is None:
                continue
            kwargs[key] = coerce_value(cls, key, raw)
    cfg = cls(**kwargs)
    if hasattr(cfg, "validate"):
        cfg.validate()
    return cfg


def load_config(path, cls=ExperimentConfig, overrides: dict | None = None):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return build_config(cls, parse_kv_text(text), overrides)
