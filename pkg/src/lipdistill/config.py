"""Run configuration: four dataclass sections behind flat dotted keys.

A run is configured by defaults, then a JSON file of {"section.field":
value} entries, then command-line overrides, in that order. Unknown keys
are a hard error so typos never silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .blocks import ModelConfig
from .losses import DistillConfig
from .synthdata import SynthConfig
from .train import TrainConfig

__all__ = ["RunConfig", "ConfigError", "build_run_config", "known_keys",
           "flatten_run_config"]


class ConfigError(ValueError):
    """Bad key, bad value, or inconsistent configuration."""


_SECTIONS = {"data": SynthConfig, "model": ModelConfig,
             "train": TrainConfig, "distill": DistillConfig}


@dataclass
class RunConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    out_dir: str = ""

    def validate(self):
        try:
            self.data.validate()
            self.model.validate()
            self.train.validate()
            self.distill.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        mirrored = [("num_classes", self.data.num_classes, self.model.num_classes),
                    ("visual frames", self.data.visual_frames, self.model.visual_frames),
                    ("visual channels", self.data.visual_channels, self.model.visual_channels),
                    ("visual height", self.data.visual_height, self.model.visual_height),
                    ("visual width", self.data.visual_width, self.model.visual_width),
                    ("audio frames", self.data.audio_frames, self.model.audio_frames),
                    ("audio bins", self.data.audio_bins, self.model.audio_bins)]
        for name, d, m in mirrored:
            if d != m:
                raise ConfigError(f"data/model disagree on {name}: {d} vs {m}")


def known_keys() -> dict:
    """Flat key -> python type, for validation and coercion."""
    keys = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            keys[f"{section}.{f.name}"] = f.type
    keys["out_dir"] = "str"
    return keys


def flatten_run_config(cfg: RunConfig) -> dict:
    flat = {}
    for section in _SECTIONS:
        for key, value in dataclasses.asdict(getattr(cfg, section)).items():
            flat[f"{section}.{key}"] = value
    flat["out_dir"] = cfg.out_dir
    return flat


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, value, current):
    """Coerce a JSON or command-line value to the field's current type."""
    if key == "train.max_steps":   # the one optional-int field
        if value is None or str(value).strip().lower() in {"none", "null", ""}:
            return None
        return _coerce_int(key, value)
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        sval = str(value).strip().lower()
        if sval in _TRUE:
            return True
        if sval in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, int):
        return _coerce_int(key, value)
    if isinstance(current, float):
        try:
            return float(str(value))
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(current, tuple):
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                raise ConfigError(f"{key}: expected a JSON list, got {value!r}") from None
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, (list, tuple)) else v for v in value)
    if isinstance(current, str):
        return str(value)
    raise ConfigError(f"{key}: unsupported value {value!r}")


def _coerce_int(key, value):
    try:
        return int(str(value))
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def _apply(cfg: RunConfig, updates: dict, origin: str):
    keys = known_keys()
    for key, value in updates.items():
        if key not in keys:
            raise ConfigError(f"unknown configuration key {key!r} (from {origin})")
        if key == "out_dir":
            cfg.out_dir = str(value)
            continue
        section, _, name = key.partition(".")
        target = getattr(cfg, section)
        coerced = _coerce(key, value, getattr(target, name))
        # sections may be frozen dataclasses; rebuild instead of setattr
        setattr(cfg, section, dataclasses.replace(target, **{name: coerced}))


def build_run_config(config_file=None, overrides=None) -> RunConfig:
    """Defaults, then the JSON file, then overrides; validated at the end."""
    cfg = RunConfig()
    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
        _apply(cfg, data, str(path))
    if overrides:
        _apply(cfg, dict(overrides), "command line")
    cfg.validate()
    return cfg
