"""Flat ``key=value`` run configuration shared by every CLI command.

Keys are the fields of :class:`GenConfig` and :class:`TrainConfig` (``seed``
is shared), plus ``preset`` (``full`` or ``desk``) and the path keys
``dataset_dir`` and ``out_dir``. Lines starting with ``#`` are comments.
Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .synthgen import GenConfig
from .train import TrainConfig

PRESETS = ("full", "desk")
PATH_KEYS = ("dataset_dir", "out_dir")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types() -> dict[str, type]:
    types: dict[str, type] = {"preset": str}
    for cls in (GenConfig, TrainConfig):
        for f in dataclasses.fields(cls):
            default = f.default
            types[f.name] = type(default)
    for key in PATH_KEYS:
        types[key] = str
    return types


KEY_TYPES = _field_types()
KEYS = tuple(KEY_TYPES)


def parse_value(key: str, raw: str) -> Any:
    if key not in KEY_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = KEY_TYPES[key]
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text, 0)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} is not a valid {kind.__name__}") from None
    if key == "preset" and text not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}, got {text!r}")
    return text


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in KEY_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = parse_value(key, value)
    return out


def load_file(path) -> dict[str, Any]:
    p = Path(path)
    return parse_text(p.read_text(encoding="utf-8"), str(p))


@dataclasses.dataclass
class RunConfig:
    values: dict[str, Any] = dataclasses.field(default_factory=dict)

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def gen_config(self) -> GenConfig:
        kw = {k: v for k, v in self.values.items() if k in GenConfig.field_names()}
        if self.values.get("preset", "full") == "desk":
            return GenConfig.desk(**kw)
        return GenConfig(**kw)

    def train_config(self) -> TrainConfig:
        kw = {k: v for k, v in self.values.items() if k in TrainConfig.field_names()}
        return TrainConfig(**kw)

    def resolved(self) -> dict[str, Any]:
        """Every key with its effective value, in a stable order."""
        gen = dataclasses.asdict(self.gen_config())
        train = dataclasses.asdict(self.train_config())
        out: dict[str, Any] = {"preset": self.values.get("preset", "full")}
        out.update(gen)
        out.update(train)
        for key in PATH_KEYS:
            if key in self.values:
                out[key] = self.values[key]
        return out

    def to_text(self, header: list[str] | None = None) -> str:
        lines = [f"# {h}" for h in header or []]
        for key, value in self.resolved().items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


def build(config_path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if config_path is not None:
        values.update(load_file(config_path))
    for key, value in (overrides or {}).items():
        if key not in KEY_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return RunConfig(values)
