"""Run configuration: a strict, versioned JSON schema over the component
configs.  Unknown keys are errors (never warnings), and precedence is
CLI flag > config file > built-in default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .encoder import EncoderConfig
from .index_infer import DecodeConfig
from .linker import TrainConfig
from .synth import GeneratorConfig
from .training import MODES

CONFIG_VERSION = 1

PATH_KEYS = (
    "kb",
    "vocab",
    "train_corpus",
    "dev_corpus",
    "test_corpus",
    "corpus",
    "checkpoint",
    "predictions",
    "report",
    "log",
    "out_dir",
)


class ConfigError(ValueError):
    """Invalid, unknown, or conflicting configuration input."""


@dataclass
class SegmentConfig:
    max_mentions: int = 8
    max_tokens: int = 512

    def validate(self) -> None:
        if self.max_mentions < 1 or self.max_tokens < 3:
            raise ConfigError("segment caps must be positive (max_tokens >= 3)")


@dataclass
class RunConfig:
    mode: str = "collective"
    seed: int = 0
    deterministic: bool = True
    threads: int = 1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    generate: GeneratorConfig = field(default_factory=GeneratorConfig)
    paths: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            # vocab_size is filled in from the vocabulary file at run time.
            enc = self.encoder
            if enc.vocab_size == 0:
                enc = dataclasses.replace(enc, vocab_size=1)
            enc.validate()
            self.train.validate()
            self.decode.validate()
            self.segment.validate()
            self.generate.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for key in self.paths:
            if key not in PATH_KEYS:
                raise ConfigError(f"unknown config key: paths.{key}")


def _check_value(current, value, path: str) -> None:
    """Reject values whose JSON type disagrees with the field default's."""
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigError(f"config key {path} expects a boolean")
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {path} expects an integer")
    if isinstance(current, float) and not isinstance(value, (int, float)):
        raise ConfigError(f"config key {path} expects a number")
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"config key {path} expects a string")


def _apply_section(obj, updates: dict, path: str) -> None:
    allowed = {f.name for f in fields(obj)}
    for key, value in updates.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key: {path}.{key}")
        _check_value(getattr(obj, key), value, f"{path}.{key}")
        object.__setattr__(obj, key, value)


_SECTIONS = ("encoder", "train", "decode", "segment", "generate")
_SCALARS = ("mode", "seed", "deterministic", "threads")


def _replace_frozen(obj, updates: dict, path: str):
    allowed = {f.name for f in fields(obj)}
    for key, value in updates.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key: {path}.{key}")
        _check_value(getattr(obj, key), value, f"{path}.{key}")
    return dataclasses.replace(obj, **updates)


def apply_updates(
    cfg: RunConfig, raw: dict, source: str, seen: set[str] | None = None
) -> RunConfig:
    """Overlay a nested update dict onto a RunConfig; unknown keys raise.

    ``seen`` collects dotted key paths that were explicitly set, so callers
    can distinguish defaults from user-provided values.
    """
    if seen is None:
        seen = set()
    for key in raw:
        if key == "version" or key in _SCALARS or key in _SECTIONS or key == "paths":
            continue
        raise ConfigError(f"unknown config key in {source}: {key}")
    for key in _SCALARS:
        if key in raw:
            _check_value(getattr(cfg, key), raw[key], key)
            setattr(cfg, key, raw[key])
            seen.add(key)
    for section in _SECTIONS:
        if section in raw:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"config section {section!r} must be an object")
            current = getattr(cfg, section)
            if getattr(current, "__dataclass_params__").frozen:
                setattr(cfg, section, _replace_frozen(current, raw[section], section))
            else:
                _apply_section(current, raw[section], section)
            seen.update(f"{section}.{k}" for k in raw[section])
    if "paths" in raw:
        if not isinstance(raw["paths"], dict):
            raise ConfigError("config section 'paths' must be an object")
        for key, value in raw["paths"].items():
            if key not in PATH_KEYS:
                raise ConfigError(f"unknown config key: paths.{key}")
            cfg.paths[key] = str(value)
            seen.add(f"paths.{key}")
    return cfg


def load_run_config(path: str, seen: set[str] | None = None) -> RunConfig:
    """Parse and validate a versioned JSON config file."""
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    if "version" not in raw:
        raise ConfigError("config file must declare a 'version'")
    if raw["version"] != CONFIG_VERSION:
        raise ConfigError(
            f"unsupported config version {raw['version']!r}, expected {CONFIG_VERSION}"
        )
    cfg = RunConfig()
    apply_updates(cfg, raw, source=path, seen=seen)
    return cfg


def dump_run_config(cfg: RunConfig) -> str:
    payload = {
        "version": CONFIG_VERSION,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "deterministic": cfg.deterministic,
        "threads": cfg.threads,
        "encoder": dataclasses.asdict(cfg.encoder),
        "train": dataclasses.asdict(cfg.train),
        "decode": dataclasses.asdict(cfg.decode),
        "segment": dataclasses.asdict(cfg.segment),
        "generate": dataclasses.asdict(cfg.generate),
        "paths": dict(sorted(cfg.paths.items())),
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
