"""Flat text configuration for the command-line tools.

One ``name = value`` per line, ``#`` comments, names namespaced with
dots (``engine.prefill_chunk_tokens = 64``).  Values are coerced by the
target field's type; enums take their value string.  Unknown names are
errors so typos surface instead of silently using defaults.
"""
from __future__ import annotations

import dataclasses
import enum
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any

from .backend import CostModel, SamplingParams
from .engine import EngineConfig
from .instrument import InstrumentModel
from .midi import TrackerConfig
from .scheduler import SchedulerConfig
from .tokenizer import TokenizerConfig

ENV_CONFIG_PATH = "PIANODUET_CONFIG"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class AppConfig:
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    instrument: InstrumentModel = field(default_factory=InstrumentModel)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    cost: CostModel = field(default_factory=CostModel)
    calibration_repeats: int = 5
    calibration_velocity_step: int = 1


_SECTIONS = {
    "tokenizer": "tokenizer",
    "engine": "engine",
    "sampling": ("engine", "sampling"),
    "scheduler": "scheduler",
    "instrument": "instrument",
    "tracker": "tracker",
    "cost": "cost",
}
_TOP_LEVEL = {"calibration_repeats", "calibration_velocity_step"}


def _coerce(raw: str, target_type: Any, where: str) -> Any:
    if isinstance(target_type, type) and issubclass(target_type, enum.Enum):
        try:
            return target_type(raw)
        except ValueError:
            valid = ", ".join(m.value for m in target_type)
            raise ConfigError(f"{where}: expected one of {valid}, got {raw!r}") from None
    if target_type is bool or str(target_type) in ("bool", "<class 'bool'>"):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if target_type is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if target_type is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    return raw


def _field_map(obj: Any) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in fields(obj)}


def _resolved_type(f: dataclasses.Field, current: Any) -> Any:
    #  String annotations (from __future__ import annotations) reduce to the
    #  runtime type of the default, which every config field has.
    if isinstance(current, bool):
        return bool
    if isinstance(current, enum.Enum):
        return type(current)
    if isinstance(current, int):
        return int
    if isinstance(current, float):
        return float
    return str


def parse_config(text: str, base: AppConfig | None = None) -> AppConfig:
    cfg = base or AppConfig()
    # Collect per-section overrides, then rebuild the frozen dataclasses.
    updates: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'name = value'")
        name, _, raw_value = line.partition("=")
        name = name.strip()
        raw_value = raw_value.strip()
        if not name or not raw_value:
            raise ConfigError(f"line {lineno}: expected 'name = value'")
        if name in _TOP_LEVEL:
            current = getattr(cfg, name)
            top[name] = _coerce(raw_value, type(current), name)
            continue
        if "." not in name:
            raise ConfigError(f"line {lineno}: unknown setting {name!r}")
        section, _, key = name.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        target = _section_object(cfg, section)
        fmap = _field_map(target)
        if key not in fmap:
            raise ConfigError(f"line {lineno}: unknown setting {name!r}")
        current = getattr(target, key)
        updates.setdefault(section, {})[key] = _coerce(
            raw_value, _resolved_type(fmap[key], current), name
        )

    return _apply(cfg, updates, top)


def _section_object(cfg: AppConfig, section: str) -> Any:
    path = _SECTIONS[section]
    if isinstance(path, tuple):
        obj: Any = cfg
        for part in path:
            obj = getattr(obj, part)
        return obj
    return getattr(cfg, path)


def _apply(cfg: AppConfig, updates: dict[str, dict[str, Any]], top: dict[str, Any]) -> AppConfig:
    try:
        sampling = cfg.engine.sampling
        if "sampling" in updates:
            sampling = replace(sampling, **updates["sampling"])
        engine = cfg.engine
        if "engine" in updates or "sampling" in updates:
            engine = replace(engine, **updates.get("engine", {}), sampling=sampling)
        out = replace(
            cfg,
            tokenizer=replace(cfg.tokenizer, **updates.get("tokenizer", {})),
            engine=engine,
            scheduler=replace(cfg.scheduler, **updates.get("scheduler", {})),
            instrument=replace(cfg.instrument, **updates.get("instrument", {})),
            tracker=replace(cfg.tracker, **updates.get("tracker", {})),
            cost=replace(cfg.cost, **updates.get("cost", {})),
            **top,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return out


def load_config(path: str | None) -> AppConfig:
    """Load the given path, else the env-var path, else defaults."""
    if path is None:
        path = os.environ.get(ENV_CONFIG_PATH) or None
    if path is None:
        return AppConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def dump_config(cfg: AppConfig) -> str:
    """Render every setting, one line each, in parseable form."""
    lines = []
    for section in _SECTIONS:
        target = _section_object(cfg, section)
        for f in fields(target):
            if f.name == "sampling":
                continue
            value = getattr(target, f.name)
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{section}.{f.name} = {value}")
    for name in sorted(_TOP_LEVEL):
        lines.append(f"{name} = {getattr(cfg, name)}")
    return "\n".join(lines) + "\n"
