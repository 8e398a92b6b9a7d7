"""Flat ``key = value`` run configuration with dotted namespaces.

Example file::

    # comments start with '#'
    train.lr = 0.001
    train.max_epochs = 50
    synth.velocity = 3.0, 1.5
    krige.standardized = true

Values are parsed against the type of the built-in default for the key;
unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path

from nowcast.data_pipeline import PreprocessConfig
from nowcast.errors import ConfigError
from nowcast.kriging import KrigeConfig
from nowcast.models import NetConfig
from nowcast.synthetic import SynthConfig
from nowcast.training import TrainConfig


SECTIONS = {
    "synth": SynthConfig,
    "preprocess": PreprocessConfig,
    "krige": KrigeConfig,
    "net": NetConfig,
    "train": TrainConfig,
}


def defaults():
    flat = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            flat[f"{section}.{f.name}"] = f.default
    return flat


def _parse_value(raw, like, key):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            items = [p.strip() for p in raw.split(",") if p.strip()]
            elem = like[0] if like else ""
            return tuple(_parse_value(p, elem, key) for p in items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_text(text):
    """Parse config text into {dotted key: raw string}."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve(path=None, overrides=None):
    """Defaults, then the config file, then ``overrides`` (already typed or raw strings)."""
    flat = defaults()
    layers = []
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found")
        layers.append(parse_text(p.read_text()))
    if overrides:
        layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key not in flat:
                raise ConfigError(f"unknown config key {key!r}")
            flat[key] = _parse_value(value, flat[key], key) if isinstance(value, str) else value
    return flat


def section(flat, name):
    """Instantiate the dataclass for one namespace from a resolved flat config."""
    cls = SECTIONS[name]
    kwargs = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith(name + ".")}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def dump_text(flat, keys=None):
    keys = sorted(flat) if keys is None else keys
    return "".join(f"{k} = {_fmt(flat[k])}\n" for k in keys)


def config_hash(flat, prefixes=None):
    keys = sorted(k for k in flat if prefixes is None or k.split(".", 1)[0] in prefixes)
    return hashlib.sha256(dump_text(flat, keys).encode()).hexdigest()[:16]
