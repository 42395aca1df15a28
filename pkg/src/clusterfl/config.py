"""Experiment config files (TOML) and ``key.path=value`` overrides."""

from __future__ import annotations

import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .engine import ConfigError, ExperimentConfig, config_from_dict, set_path


def parse_value(text: str):
    """Read an override value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, value = item.split("=", 1)
        key = key.strip()
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} runs through a non-table value")
        node[parts[-1]] = parse_value(value.strip())
    return doc


def read_config_dict(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        return tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def load_config(path, overrides=()) -> ExperimentConfig:
    doc = apply_overrides(read_config_dict(path), overrides)
    return config_from_dict(doc)


__all__ = ["apply_overrides", "load_config", "parse_value", "read_config_dict", "set_path"]
