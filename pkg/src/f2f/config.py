"""Run configuration: a flat key=value file with section prefixes.

Keys look like ``world.speed=2.0,8.0``, ``stub.feat_dim=64``,
``f2f.variant=deformable``, ``train.epochs=20`` or
``train.f2f_l2.epochs=20``. ``train.<field>`` overrides every stage and
``train.<stage>.<field>`` one stage. Top-level keys cover the seed,
precision mode and dataset size. ``run.*`` keys are provenance written into
manifests and ignored on input, so a manifest is itself a valid config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .datagen import WorldConfig
from .errors import ConfigError
from .io import read_manifest
from .models import F2FConfig
from .pipeline import STAGES, TrainSpec
from .stub import StubConfig

PRECISIONS = {"single": np.float32, "double": np.float64}
_TOP = ("seed", "precision", "clips", "val_fraction", "split_seed")


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    stub: StubConfig = field(default_factory=StubConfig)
    f2f: F2FConfig = field(default_factory=lambda: F2FConfig(hidden=64))
    train: dict = field(default_factory=dict)  # stage or "*" -> {field: value}
    seed: int = 0
    precision: str = "single"
    clips: int = 120
    val_fraction: float = 0.25
    split_seed: int = 0

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def validate(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if self.clips < 2 or not 0 < self.val_fraction < 1:
            raise ConfigError("need clips >= 2 and 0 < val_fraction < 1")
        if self.f2f.channels_per_frame != self.stub.feat_dim:
            raise ConfigError(f"f2f.channels_per_frame={self.f2f.channels_per_frame} must equal "
                              f"stub.feat_dim={self.stub.feat_dim}")
        self.world.validate()
        self.stub.validate()
        self.f2f.validate()
        for stage in STAGES:
            self.spec(stage).validate()

    def spec(self, stage: str, **overrides) -> TrainSpec:
        """TrainSpec for ``stage``: stage defaults, then config overrides, then ``overrides``."""
        merged = {"seed": self.seed, **self.train.get("*", {}), **self.train.get(stage, {}), **overrides}
        return TrainSpec.for_stage(stage, **merged)

    def to_entries(self) -> dict:
        out = {}
        for section in ("world", "stub", "f2f"):
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                out[f"{section}.{k}"] = v
        for stage, values in sorted(self.train.items()):
            for k, v in sorted(values.items()):
                out[f"train.{k}" if stage == "*" else f"train.{stage}.{k}"] = v
        for k in _TOP:
            out[k] = getattr(self, k)
        return out


def _coerce(text: str, default, key: str):
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, (tuple, list)):
            items = [s for s in text.split(",") if s.strip()] if text else []
            proto = default[0] if default else 0
            vals = [_coerce(s.strip(), proto, key) for s in items]
            return tuple(vals) if isinstance(default, tuple) else vals
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None
    return text


def _defaults(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls)}


def parse_entries(entries: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    sections = {"world": dataclasses.asdict(cfg.world), "stub": dataclasses.asdict(cfg.stub),
                "f2f": dataclasses.asdict(cfg.f2f)}
    train = {k: dict(v) for k, v in cfg.train.items()}
    spec_fields = _defaults(TrainSpec)
    top = {}
    for key, text in entries.items():
        parts = key.split(".")
        if parts[0] == "run":
            continue
        if len(parts) == 1 and key in _TOP:
            top[key] = _coerce(text, getattr(RunConfig(), key), key)
        elif len(parts) == 2 and parts[0] in sections:
            sec, name = parts
            if name not in sections[sec]:
                raise ConfigError(f"unknown config key {key!r}")
            sections[sec][name] = _coerce(text, sections[sec][name], key)
        elif parts[0] == "train" and len(parts) in (2, 3):
            stage, name = ("*", parts[1]) if len(parts) == 2 else (parts[1], parts[2])
            if stage != "*" and stage not in STAGES:
                raise ConfigError(f"unknown training stage in {key!r}")
            if name not in spec_fields or name == "stage":
                raise ConfigError(f"unknown config key {key!r}")
            train.setdefault(stage, {})[name] = _coerce(text, spec_fields[name], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = dataclasses.replace(cfg, world=WorldConfig(**sections["world"]), stub=StubConfig(**sections["stub"]),
                              f2f=F2FConfig(**sections["f2f"]), train=train, **top)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    if not Path(path).exists():
        raise ConfigError(f"config file {path} not found")
    return parse_entries(read_manifest(path))


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out
