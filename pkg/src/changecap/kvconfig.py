"""Flat ``key = value`` config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import typing


class ConfigError(ValueError):
    pass


def _coerce(raw, kind, key):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def parse_kv(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def from_kv(cls, text, **overrides):
    """Build dataclass ``cls`` from key=value ``text``; unknown keys are rejected."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in parse_kv(text).items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        values[key] = _coerce(raw, hints[key], key)
    values.update(overrides)
    return cls(**values)


def load_kv(cls, path, **overrides):
    with open(path, encoding="utf-8") as fh:
        return from_kv(cls, fh.read(), **overrides)


def to_kv(obj):
    lines = []
    for f in dataclasses.fields(obj):
        lines.append(f"{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"
