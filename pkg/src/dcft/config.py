"""Resolve run configuration from defaults, an INI-style file and flag overrides.

Keys are dotted ``section.name``; the file uses ``[section]`` headers::

    [model]
    hidden_dim = 16

    [train]
    d = 8
    s = 8
    targets = all

Precedence: defaults < config file < command-line flags.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .adapters import parse_targets
from .checkpoint import canonical_json
from .errors import ConfigError
from .model import ModelSpec
from .train import TrainConfig


@dataclass(frozen=True)
class RunOptions:
    dataset: str = ""
    eval_dataset: str = ""
    task: str = "token-majority"
    out: str = "runs/latest"
    checkpoint: str = ""
    arch: str = "deberta-base-like"
    pretrain_steps: int = 0
    threshold: float = 0.9


SECTIONS = {"model": ModelSpec, "train": TrainConfig, "run": RunOptions}

# keys whose value is a path for this run only; excluded from the config hash
LOCAL_KEYS = {"run.out", "run.checkpoint"}

OPTIONAL_INT = {"train.max_steps"}


def all_keys() -> dict[str, Any]:
    """Every dotted key with its default value."""
    out = {}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            out[f"{section}.{f.name}"] = getattr(cls(), f.name)
    return out


def coerce(key: str, raw: Any) -> Any:
    """Convert a string (or already-typed value) to the type of ``key``'s default."""
    defaults = all_keys()
    if key not in defaults:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    default = defaults[key]
    try:
        if key in OPTIONAL_INT:
            return None if text.lower() in ("", "none") else int(text)
        if key == "train.targets":
            return parse_targets(text)
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def read_config_file(path: str | Path) -> dict[str, Any]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for name, raw in parser.items(section):
            key = f"{section}.{name}"
            values[key] = coerce(key, raw)
    return values


@dataclass
class CliConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunOptions = field(default_factory=RunOptions)

    @classmethod
    def resolve(cls, file_path: str | None = None, overrides: dict[str, Any] | None = None) -> "CliConfig":
        values = all_keys()
        if file_path:
            values.update(read_config_file(file_path))
        for key, raw in (overrides or {}).items():
            if raw is not None:
                values[key] = coerce(key, raw)
        parts: dict[str, dict] = {s: {} for s in SECTIONS}
        for key, value in values.items():
            section, name = key.split(".", 1)
            parts[section][name] = value
        try:
            cfg = cls(
                ModelSpec(**parts["model"]),
                TrainConfig(**parts["train"]),
                RunOptions(**parts["run"]),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.model.validate()
        cfg.train.validate()
        return cfg

    def to_dict(self, include_local: bool = False) -> dict:
        out = {"model": asdict(self.model), "train": self.train.to_dict(), "run": asdict(self.run)}
        if not include_local:
            for key in LOCAL_KEYS:
                section, name = key.split(".")
                out[section].pop(name, None)
        return out

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]
