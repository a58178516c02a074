"""Plain-text ``section.key=value`` configuration and named presets."""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

from .errors import ConfigError
from .grid import GridConfig

PRESETS: dict[str, GridConfig] = {
    "gridformer": GridConfig(),
    "gridformer-s": GridConfig(base_channels=32),
    "tiny": GridConfig(base_channels=8, growth=4, cetls_per_rdtl=1),
    "micro": GridConfig(fusion_columns=2, base_channels=8, growth=4, cetls_per_rdtl=1, dtype="float64"),
}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(text: str, annotation):
    text = text.strip()
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return parse_value(text, args[0])
    if origin is tuple:
        args = typing.get_args(annotation)
        item = args[0] if args else float
        return tuple(parse_value(t, item) for t in text.split(",") if t.strip())
    if annotation is bool:
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    try:
        return annotation(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse {text!r} as {annotation}") from exc


def update_dataclass(obj, values: dict[str, str]):
    hints = typing.get_type_hints(type(obj))
    known = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} for {type(obj).__name__}")
        changes[key] = parse_value(text, hints[key])
    return dataclasses.replace(obj, **changes)


def dump_dataclass(obj) -> str:
    return "".join(f"{f.name}={format_value(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))


def parse_lines(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.rpartition(".")
        sections.setdefault(section or "grid", {})[name] = value
    return sections


def grid_config(spec: str | None) -> GridConfig:
    """Resolve a preset name or a config file path to a GridConfig."""
    return load_config(spec)["grid"]


def load_config(spec: str | None) -> dict:
    """Return ``{"grid": GridConfig, "train": TrainConfig, "loss": LossConfig}``."""
    from .losses import LossConfig
    from .train import TrainConfig

    out = {"grid": GridConfig(), "train": TrainConfig(), "loss": LossConfig()}
    if spec is None:
        return out
    if spec in PRESETS:
        out["grid"] = PRESETS[spec]
        return out
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"{spec!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    sections = parse_lines(path.read_text())
    grid_values = sections.pop("grid", {})
    preset = grid_values.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        out["grid"] = PRESETS[preset]
    out["grid"] = update_dataclass(out["grid"], grid_values)
    for name, values in sections.items():
        if name not in out:
            raise ConfigError(f"unknown config section {name!r}")
        out[name] = update_dataclass(out[name], values)
    return out
