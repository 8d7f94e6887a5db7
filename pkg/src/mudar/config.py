"""JSON training configuration with a strict schema.

Every field of every section must be present; unknown fields are rejected.
Data-dependent model fields (channel count, window length, class count) are
not part of the file, they are bound from the dataset at training time.

Layout::

    {
      "model":     {"filters": [32, 128, 64], "kernel_sizes": [5, 5, 5], ...},
      "kernel":    {"gamma": null, "lam": 0.3, "min_class_count": 2},
      "weights":   {"beta0": 1.0, "beta1": 1.0, "ramp_epochs": 0, "consistency_ramp_epochs": 0},
      "ensemble":  {"momentum": 0.6, "confidence_threshold": 0.0},
      "augment":   {"jitter_sigma": 0.055, "rotation_deg": 25.0},
      "optimizer": {"lr": 0.001, ..., "seed": 0},
      "training":  {"ablation": "full", "patience": 20, ...}
    }
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .ensemble import EnsembleConfig
from .errors import ContractError, FormatError
from .losses import KernelConfig, LossWeights
from .model import ModelConfig
from .trainer import OptimizerConfig, TrainConfig

SECTIONS = {
    "model": ModelConfig,
    "kernel": KernelConfig,
    "weights": LossWeights,
    "ensemble": EnsembleConfig,
    "augment": AugmentConfig,
    "optimizer": OptimizerConfig,
}
TRAINING_FIELDS = ("ablation", "patience", "ensembling", "stop_gradient_consistency")
BOUND_MODEL_FIELDS = ("in_channels", "window_len", "num_classes")
NULLABLE = {("kernel", "gamma")}


class ConfigError(FormatError):
    pass


def to_dict(config: TrainConfig) -> dict:
    out = {}
    for name in SECTIONS:
        d = asdict(getattr(config, name))
        if name == "model":
            for k in BOUND_MODEL_FIELDS:
                d.pop(k)
        out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
    out["training"] = {k: getattr(config, k) for k in TRAINING_FIELDS}
    return out


def dumps(config: TrainConfig) -> str:
    return json.dumps(to_dict(config), indent=2, sort_keys=True) + "\n"


def _check_value(where: str, value, default, nullable: bool):
    if value is None:
        if nullable:
            return None
        raise ConfigError(f"config field {where} must not be null")
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float) or default is None:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config field {where} has the wrong type: {value!r}")
    return value


def _section(name: str, raw, cls, skip=()) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    defaults = cls()
    expected = [f.name for f in fields(cls) if f.name not in skip]
    for key in expected:
        if key not in raw:
            raise ConfigError(f"missing config field {name}.{key}")
    unknown = sorted(set(raw) - set(expected))
    if unknown:
        raise ConfigError(f"unknown config field {name}.{unknown[0]}")
    return {
        k: _check_value(f"{name}.{k}", raw[k], getattr(defaults, k), (name, k) in NULLABLE) for k in expected
    }


def from_dict(raw: dict) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    expected = list(SECTIONS) + ["training"]
    for name in expected:
        if name not in raw:
            raise ConfigError(f"missing config section {name}")
    unknown = sorted(set(raw) - set(expected))
    if unknown:
        raise ConfigError(f"unknown config section {unknown[0]}")
    try:
        parts = {
            name: cls(**_section(name, raw[name], cls, BOUND_MODEL_FIELDS if name == "model" else ()))
            for name, cls in SECTIONS.items()
        }
        training = raw["training"]
        if not isinstance(training, dict):
            raise ConfigError("config section 'training' must be an object")
        tdefaults = TrainConfig()
        for key in TRAINING_FIELDS:
            if key not in training:
                raise ConfigError(f"missing config field training.{key}")
        unknown = sorted(set(training) - set(TRAINING_FIELDS))
        if unknown:
            raise ConfigError(f"unknown config field training.{unknown[0]}")
        extra = {
            k: _check_value(f"training.{k}", training[k], getattr(tdefaults, k), False) for k in TRAINING_FIELDS
        }
        return TrainConfig(**parts, **extra)
    except ContractError as exc:
        raise ConfigError(f"invalid config value: {exc}") from None


def loads(text: str) -> TrainConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON (line {exc.lineno}: {exc.msg})") from None
    return from_dict(raw)


def load(path: str | Path) -> tuple[TrainConfig, str]:
    """Parse a config file; returns the config and the SHA-256 of its bytes."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return loads(blob.decode("utf-8")), hashlib.sha256(blob).hexdigest()


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, optimizer=replace(config.optimizer, seed=seed))
