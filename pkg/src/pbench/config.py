"""``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Values stay strings here; each
consumer converts the keys it owns.
"""
from __future__ import annotations

import os
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def load_config(path: str | os.PathLike | None) -> dict[str, str]:
    if path is None:
        return {}
    return parse_config(Path(path).read_text(encoding="utf-8"))


def parse_list(value: str, conv=float) -> list:
    return [conv(v.strip()) for v in value.split(",") if v.strip()]
