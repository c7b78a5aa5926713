"""Flat ``key = value`` config files mapped onto the config dataclasses.

Unknown keys are errors.  Tuple-valued fields take comma-separated values.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .synth import SynthSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


# model keys -> (target, field); everything in TrainConfig maps to itself
MODEL_KEYS = {
    "variant": ("gen", "variant"),
    "channels": ("gen", "channels"),
    "stem_channels": ("gen", "stem_channels"),
    "head_channels": ("gen", "head_channels"),
    "bias_mode": ("gen", "bias_mode"),
    "crf_iterations": ("gen", "crf_iterations"),
    "q_init": ("gen", "q_init"),
    "mu_init": ("gen", "mu_init"),
    "crop": ("gen", "input_hw"),
    "disc_base_exp": ("disc", "base_exp"),
    "leaky_slope": ("disc", "leaky_slope"),
}


def parse_pairs(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {lineno}: empty key")
        if k in out:
            raise ConfigError(f"line {lineno}: duplicate key {k!r}")
        out[k] = v
    return out


def _coerce(value: str, default):
    if isinstance(default, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        items = [s.strip() for s in value.split(",") if s.strip()]
        if default and isinstance(default[0], float):
            return tuple(float(s) for s in items)
        return tuple(int(s) for s in items)
    return value


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if not f.init:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    gen_overrides: dict = field(default_factory=dict)
    disc_overrides: dict = field(default_factory=dict)

    def generator_config(self, num_labels: int) -> GeneratorConfig:
        return GeneratorConfig(num_labels=num_labels, **self.gen_overrides)

    def discriminator_config(self, num_labels: int) -> DiscriminatorConfig:
        return DiscriminatorConfig(num_labels=num_labels, **self.disc_overrides)


def experiment_from_pairs(pairs: dict[str, str]) -> ExperimentConfig:
    train_defaults = _defaults(TrainConfig)
    gen_defaults = _defaults(GeneratorConfig)
    disc_defaults = _defaults(DiscriminatorConfig)
    train_kw, gen_kw, disc_kw = {}, {}, {}
    for k, v in pairs.items():
        try:
            if k in train_defaults:
                train_kw[k] = _coerce(v, train_defaults[k])
            elif k in MODEL_KEYS:
                target, name = MODEL_KEYS[k]
                if target == "gen":
                    gen_kw[name] = _coerce(v, gen_defaults[name])
                else:
                    disc_kw[name] = _coerce(v, disc_defaults[name])
            else:
                raise ConfigError(f"unknown config key {k!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {k!r}: {v!r}") from exc
    try:
        return ExperimentConfig(TrainConfig(**train_kw), gen_kw, disc_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_experiment(path) -> ExperimentConfig:
    return experiment_from_pairs(parse_pairs(Path(path).read_text(encoding="utf-8")))


def synth_spec_from_pairs(pairs: dict[str, str]) -> SynthSpec:
    defaults = _defaults(SynthSpec)
    kw = {}
    for k, v in pairs.items():
        if k not in defaults:
            raise ConfigError(f"unknown synth key {k!r}")
        try:
            kw[k] = _coerce(v, defaults[k])
        except ValueError as exc:
            raise ConfigError(f"bad value for {k!r}: {v!r}") from exc
    try:
        return SynthSpec(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def format_pairs(d: dict) -> str:
    lines = []
    for k, v in d.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
