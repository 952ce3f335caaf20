"""Flat key=value run configuration files.

One option per line, ``key = value``; blank lines and ``#`` comments are
ignored. Training options use the TrainConfig field names directly;
data-generation options use the SynthConfig field names with a
``synth_`` prefix. Values are coerced by the type of the field's
default: tuples are comma-separated, per-phase tables are
``NC:0.26,A:0.55,...`` pairs.
"""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

from .errors import ConfigError
from .synthdata import SynthConfig
from .trainer import TrainConfig

SYNTH_PREFIX = "synth_"


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = (t.strip() for t in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def load_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, str):
            return raw
        if isinstance(default, tuple):
            elem = default[0] if default else 0.0
            parts = [t.strip() for t in raw.split(",") if t.strip()]
            if isinstance(elem, str):
                return tuple(parts)
            cast = int if isinstance(elem, int) else float
            return tuple(cast(t) for t in parts)
        if isinstance(default, dict):
            out = {}
            for part in (t.strip() for t in raw.split(",") if t.strip()):
                if ":" not in part:
                    raise ValueError(f"expected name:value, got {part!r}")
                name, val = (t.strip() for t in part.split(":", 1))
                out[name] = float(val)
            return out
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad value for {key!r}: {e}") from e
    raise ConfigError(f"cannot coerce option {key!r} (unsupported field type)")


def _apply(cfg, kv: dict[str, str], strip_prefix: str = ""):
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    updates = {}
    for key, raw in kv.items():
        name = key[len(strip_prefix):]
        if name not in known:
            raise ConfigError(f"unknown option {key!r}")
        updates[name] = _coerce(raw, known[name], key)
    return replace(cfg, **updates) if updates else cfg


def split_config(kv: dict[str, str]) -> tuple[dict[str, str], dict[str, str]]:
    synth = {k: v for k, v in kv.items() if k.startswith(SYNTH_PREFIX)}
    train = {k: v for k, v in kv.items() if not k.startswith(SYNTH_PREFIX)}
    return train, synth


def build_configs(kv: dict[str, str], *, base_train: TrainConfig | None = None,
                  base_synth: SynthConfig | None = None) -> tuple[TrainConfig, SynthConfig]:
    """Turn parsed options into validated config objects."""
    train_kv, synth_kv = split_config(kv)
    train = _apply(base_train or TrainConfig(), train_kv)
    synth = _apply(base_synth or SynthConfig(), synth_kv, strip_prefix=SYNTH_PREFIX)
    train.validate()
    synth.validate()
    return train, synth


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, dict):
        return ",".join(f"{k}:{_format_value(x)}" for k, x in v.items())
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_configs(train: TrainConfig, synth: SynthConfig) -> str:
    """Render configs back to the file format (round-trips losslessly)."""
    lines = ["# training"]
    for f in fields(train):
        lines.append(f"{f.name} = {_format_value(getattr(train, f.name))}")
    lines.append("")
    lines.append("# data generation")
    for f in fields(synth):
        lines.append(f"{SYNTH_PREFIX}{f.name} = {_format_value(getattr(synth, f.name))}")
    return "\n".join(lines) + "\n"
