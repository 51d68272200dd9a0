"""
Flat ``key = value`` configuration files.

Keys are the field names of `DataConfig`, `ModelConfig`, `TrainConfig` and
`EvalConfig`. A key present in several of them (``seed``) sets all of them.
Tuples are comma separated, an empty value gives an empty tuple. ``#`` starts
a comment.
"""

from __future__ import annotations

import logging
import pathlib
from typing import Any, Iterable, Mapping

import attr

from unicontext import exceptions
from unicontext.evaluation import EvalConfig
from unicontext.model import ModelConfig
from unicontext.synthdata import DataConfig
from unicontext.training import TrainConfig

logger = logging.getLogger(__name__)

SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}
# Taken from the trained tokenizers, never from a file
DERIVED_KEYS = {("model", "vocab_size")}
TRUE_VALUES = ("1", "true", "yes", "on")
FALSE_VALUES = ("0", "false", "no", "off")


@attr.dataclass(frozen=True, kw_only=True)
class Settings:
    data: DataConfig = attr.ib(factory=DataConfig)
    model: ModelConfig = attr.ib(factory=ModelConfig)
    train: TrainConfig = attr.ib(factory=TrainConfig)
    eval: EvalConfig = attr.ib(factory=EvalConfig)


@attr.dataclass(frozen=True, kw_only=True)
class Key:
    name: str
    type_name: str
    targets: tuple[str, ...]


def config_keys() -> dict[str, Key]:
    keys: dict[str, Key] = {}
    for section, cls in SECTIONS.items():
        for field in attr.fields(cls):
            if (section, field.name) in DERIVED_KEYS:
                continue
            type_name = str(field.type)
            existing = keys.get(field.name)
            if existing and existing.type_name != type_name:
                raise exceptions.ConfigError(
                    f"Key {field.name} has conflicting types "
                    f"{existing.type_name} and {type_name}"
                )
            targets = existing.targets if existing else ()
            keys[field.name] = Key(
                name=field.name, type_name=type_name, targets=(*targets, section)
            )
    return keys


def _parse_scalar(type_name: str, raw: str) -> Any:
    if type_name == "bool":
        lowered = raw.lower()
        if lowered in TRUE_VALUES:
            return True
        if lowered in FALSE_VALUES:
            return False
        raise ValueError(f"expected one of {', '.join(TRUE_VALUES + FALSE_VALUES)}")
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    if type_name == "str":
        return raw
    raise ValueError(f"unsupported type {type_name}")


def parse_value(key: Key, raw: str) -> Any:
    raw = raw.strip()
    try:
        if key.type_name.startswith("tuple["):
            item_type = key.type_name[len("tuple[") :].split(",")[0].strip()
            return tuple(
                _parse_scalar(item_type, item.strip())
                for item in raw.split(",")
                if item.strip()
            )
        return _parse_scalar(key.type_name, raw)
    except ValueError as exc:
        raise exceptions.ConfigError(
            f"Invalid value {raw!r} for {key.name} ({key.type_name}): {exc}"
        ) from exc


def format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(format_value(item) for item in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config(text: str, source: str = "<config>") -> dict[str, str]:
    """
    Raw values of a config file, by key. Unknown keys are rejected.
    """
    keys = config_keys()
    values: dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, raw = line.partition("=")
        name = name.strip()
        if not sep:
            raise exceptions.ConfigError(f"{source}:{number}: expected key = value")
        if name not in keys:
            raise exceptions.ConfigError(f"{source}:{number}: unknown key {name!r}")
        values[name] = raw.strip()
    return values


def load_config(path: pathlib.Path) -> dict[str, str]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise exceptions.ConfigError(f"Cannot read config file {path}") from exc
    values = read_config(text, source=str(path))
    logger.debug(
        f"Read {len(values)} key(s) from {path}",
        extra={"action": "load_config", "path": str(path), "keys": sorted(values)},
    )
    return values


def build_settings(
    layers: Iterable[Mapping[str, Any]], base: Settings | None = None
) -> Settings:
    """
    Apply layers of values on top of ``base``, later layers winning. Values may
    be raw strings or already typed.
    """
    keys = config_keys()
    changes: dict[str, dict[str, Any]] = {section: {} for section in SECTIONS}
    for layer in layers:
        for name, value in layer.items():
            if name not in keys:
                raise exceptions.ConfigError(f"Unknown config key {name!r}")
            key = keys[name]
            if isinstance(value, str):
                value = parse_value(key, value)
            for section in key.targets:
                changes[section][name] = value

    settings = base or Settings()
    try:
        return Settings(
            **{
                section: attr.evolve(getattr(settings, section), **changes[section])
                for section in SECTIONS
            }
        )
    except (ValueError, TypeError) as exc:
        if isinstance(exc, exceptions.ConfigError):
            raise
        raise exceptions.ConfigError(f"Invalid configuration: {exc}") from exc


def settings_values(settings: Settings) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for name, key in config_keys().items():
        # Shared keys hold the same value in every section
        values[name] = getattr(getattr(settings, key.targets[0]), name)
    return values


def dump_settings(settings: Settings) -> str:
    values = settings_values(settings)
    return "".join(
        f"{name} = {format_value(values[name])}\n" for name in sorted(values)
    )


def write_effective(
    settings: Settings, out: pathlib.Path, command: str
) -> pathlib.Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"effective-{command}.conf"
    path.write_text(dump_settings(settings))
    logger.debug(
        f"Wrote effective configuration to {path}",
        extra={"action": "write_effective_config", "path": str(path)},
    )
    return path
