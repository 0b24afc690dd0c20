"""Flat ``section.key = value`` configuration for the whole pipeline.

Sections map onto the per-stage dataclasses (``sfm``, ``light``, ``reg``,
``final``) plus a few top-level keys. A single ``seed`` drives every random
choice; per-stage seed fields are not exposed separately.
"""

from __future__ import annotations

import hashlib
from dataclasses import fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

from .evaluate import PipelineSettings, with_seed

SECTIONS = ("sfm", "light", "reg", "final")


class ConfigError(ValueError):
    pass


def _flatten(settings: PipelineSettings) -> dict:
    out = {}
    for f in fields(settings):
        val = getattr(settings, f.name)
        if is_dataclass(val):
            for g in fields(val):
                if g.name != "seed":
                    out[f"{f.name}.{g.name}"] = getattr(val, g.name)
        else:
            out[f.name] = val
    return out


def default_settings(seed: int = 42) -> PipelineSettings:
    return with_seed(PipelineSettings(), seed)


def _parse_value(key: str, text: str, default):
    t = text.strip()
    try:
        if isinstance(default, bool):
            low = t.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(t)
        if isinstance(default, int):
            return int(t)
        if isinstance(default, float):
            return float(t)
        if isinstance(default, tuple) or default is None:
            if t.lower() == "none":
                return None
            return tuple(float(x) for x in t.split(","))
        if isinstance(default, str):
            return t
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {text!r}") from e
    raise ConfigError(f"cannot parse {key}")  # pragma: no cover


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def apply_overrides(settings: PipelineSettings, values: dict, seed: Optional[int] = None) -> PipelineSettings:
    """Return a copy with ``values`` (already-typed or string) applied; unknown keys raise."""
    flat = _flatten(settings)
    sections = {s: {} for s in SECTIONS}
    top = {}
    for key, raw in values.items():
        if key == "seed":
            seed = int(raw)
            continue
        if key not in flat:
            raise ConfigError(f"unknown config key: {key}")
        val = _parse_value(key, raw, flat[key]) if isinstance(raw, str) else raw
        if "." in key:
            sec, name = key.split(".", 1)
            sections[sec][name] = val
        else:
            top[key] = val
    try:
        out = replace(settings, **top, **{s: replace(getattr(settings, s), **kv) for s, kv in sections.items() if kv})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if seed is not None:
        out = with_seed(out, seed)
    return out


def parse_config_text(text: str) -> dict:
    values = {}
    for no, ln in enumerate(text.splitlines(), 1):
        s = ln.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"line {no}: expected key = value")
        k, v = s.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def load_config(path, seed: Optional[int] = None) -> PipelineSettings:
    values = parse_config_text(Path(path).read_text())
    return apply_overrides(default_settings(), values, seed)


def settings_seed(settings: PipelineSettings) -> int:
    return settings.light.seed


def dump_config(settings: PipelineSettings) -> str:
    lines = [f"seed = {settings_seed(settings)}"]
    lines += [f"{k} = {_format_value(v)}" for k, v in sorted(_flatten(settings).items())]
    return "\n".join(lines) + "\n"


def config_hash(settings: PipelineSettings) -> str:
    return hashlib.sha256(dump_config(settings).encode()).hexdigest()[:16]
