"""Flat ``key: value`` configuration files mapped onto the nested config dataclasses.

Every leaf field of every config dataclass is addressable by its bare field
name (names are unique across sections).  Resolution order, later wins:
built-in defaults, the named ``preset``, the config file, ``APP_<KEY>``
environment variables, command-line overrides.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .data import PhantomConfig
from .train import TRAIN_PRESETS, TrainConfig

ENV_PREFIX = "APP_"


class ConfigError(ValueError):
    pass


@dataclass
class ScoreConfig:
    map_alpha: float = 0.6
    map_beta: float = 0.4
    map_metric: str = "weighted"
    binarization: str = "global_otsu"
    restrict_to_roi: bool = False
    threshold_policy: str = "fit"


@dataclass
class RunConfig:
    preset: str = "desk"
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    scoring: ScoreConfig = field(default_factory=ScoreConfig)


def _leaves(cls, prefix: tuple = ()) -> dict[str, tuple[tuple, Any]]:
    hints = typing.get_type_hints(cls)
    out: dict[str, tuple[tuple, Any]] = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            for k, v in _leaves(tp, prefix + (f.name,)).items():
                if k in out:
                    raise RuntimeError(f"config key {k!r} is ambiguous")
                out[k] = v
        else:
            if f.name in out:
                raise RuntimeError(f"config key {f.name!r} is ambiguous")
            out[f.name] = (prefix + (f.name,), tp)
    return out


KEYS = _leaves(RunConfig)
_TRAIN_KEYS = {k: (path[1:], tp) for k, (path, tp) in KEYS.items() if path[0] == "train"}


def _parse_value(key: str, text: str, tp) -> Any:
    text = text.strip()
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if origin is tuple:
            args = typing.get_args(tp)
            elem = args[0]
            items = [t for t in text.strip("()[] ").replace(" ", "").split(",") if t]
            vals = tuple(elem(v) for v in items)
            if not (len(args) == 2 and args[1] is Ellipsis) and len(vals) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return vals
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
    raise ConfigError(f"unsupported type for {key}: {tp}")


def _format_value(v: Any) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key: value'")
        k, v = line.split(":", 1)
        k = k.strip()
        if k not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {k!r}")
        out[k] = v.strip()
    return out


def _replace_many(obj, updates: Mapping[tuple, Any]):
    """Apply all ``path -> value`` updates, rebuilding each dataclass once."""
    direct = {p[0]: v for p, v in updates.items() if len(p) == 1}
    nested: dict[str, dict[tuple, Any]] = {}
    for p, v in updates.items():
        if len(p) > 1:
            nested.setdefault(p[0], {})[p[1:]] = v
    for name, sub in nested.items():
        direct[name] = _replace_many(getattr(obj, name), sub)
    return dataclasses.replace(obj, **direct) if direct else obj


def _updates(values: Mapping[str, str], keys: Mapping[str, tuple[tuple, Any]]) -> dict[tuple, Any]:
    out = {}
    for k, text in values.items():
        if k not in keys:
            raise ConfigError(f"unknown config key {k!r}")
        path, tp = keys[k]
        out[path] = _parse_value(k, text, tp)
    return out


def apply_values(rc: RunConfig, values: Mapping[str, str]) -> RunConfig:
    try:
        return _replace_many(rc, _updates(values, KEYS))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def env_values(env: Mapping[str, str]) -> dict[str, str]:
    out = {}
    for name, v in env.items():
        if name.startswith(ENV_PREFIX):
            k = name[len(ENV_PREFIX):].lower()
            if k in KEYS:
                out[k] = v
    return out


def resolve(config_file: Optional[str | Path] = None, overrides: Optional[Mapping[str, str]] = None,
            env: Optional[Mapping[str, str]] = None) -> RunConfig:
    env = os.environ if env is None else env
    file_vals = parse_config_text(Path(config_file).read_text(), str(config_file)) if config_file else {}
    env_vals = env_values(env)
    over = {k: str(v) for k, v in (overrides or {}).items() if v is not None}
    preset = over.get("preset") or env_vals.get("preset") or file_vals.get("preset") or "desk"
    if preset not in TRAIN_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(TRAIN_PRESETS)}")
    train = TRAIN_PRESETS[preset]()
    phantom = PhantomConfig(size=train.model.input_resolution)
    rc = RunConfig(preset=preset, train=train, phantom=phantom)
    for vals in (file_vals, env_vals, over):
        rc = apply_values(rc, vals)
    return rc


def to_text(rc: RunConfig) -> str:
    lines = ["# resolved configuration"]
    for k, (path, _) in KEYS.items():
        v = rc
        for p in path:
            v = getattr(v, p)
        lines.append(f"{k}: {_format_value(v)}")
    return "\n".join(lines) + "\n"


def train_config_to_flat(cfg: TrainConfig) -> dict[str, str]:
    out = {}
    for k, (path, _) in _TRAIN_KEYS.items():
        v = cfg
        for p in path:
            v = getattr(v, p)
        out[k] = _format_value(v)
    return out


def train_config_from_flat(values: Mapping[str, str]) -> TrainConfig:
    return _replace_many(TrainConfig(), _updates(values, _TRAIN_KEYS))
