"""Run configuration files: one ``key = value`` per line, ``#`` starts a comment.

Keys are the fields of :class:`ModelConfig` and :class:`TrainConfig` plus the
run-level keys below. Relative paths are resolved against the directory of
the config file. Keys that are absent take their defaults, and each default
is logged so a run's effective settings are never silent.
"""

from __future__ import annotations

import logging
import types
import typing
from dataclasses import MISSING, dataclass, fields
from pathlib import Path

from .errors import ConfigurationError
from .model import ModelConfig
from .training import DEFAULT_SIGMA_GRID, TrainConfig

log = logging.getLogger(__name__)

TASKS = ("hans-style", "local")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    task: str
    train_data: Path | None
    dev_data: Path | None
    diagnostic_data: Path | None
    out_dir: Path
    sigma_grid: tuple[float, ...]

    def to_dict(self) -> dict:
        """Settings that determine the numbers; paths are left out."""
        return {
            "model": self.model.to_dict(),
            "train": {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)},
            "task": self.task,
        }


_RUN_KEYS = {
    "task": "hans-style",
    "train_data": None,
    "dev_data": None,
    "diagnostic_data": None,
    "out_dir": "out",
    "sigma_grid": ",".join(repr(s) for s in DEFAULT_SIGMA_GRID),
}


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _defaults(cls) -> dict[str, object]:
    return {f.name: f.default for f in fields(cls) if f.default is not MISSING}


MODEL_KEYS = _field_types(ModelConfig)
TRAIN_KEYS = _field_types(TrainConfig)
KNOWN_KEYS = set(MODEL_KEYS) | set(TRAIN_KEYS) | set(_RUN_KEYS)


def _convert(key: str, raw: str, kind) -> object:
    optional = False
    if isinstance(kind, types.UnionType) or typing.get_origin(kind) is typing.Union:
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        optional, kind = True, args[0]
    if optional and raw.lower() == "none":
        return None
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false"):
                raise ValueError(raw)
            return lowered == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``{key: value}`` strings; rejects malformed lines, duplicates and unknown keys."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key not in KNOWN_KEYS:
            raise ConfigurationError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigurationError(f"{source}:{lineno}: duplicate config key {key!r}")
        values[key] = value
    return values


def _sigma_grid(raw: str) -> tuple[float, ...]:
    try:
        grid = tuple(float(s) for s in raw.split(",") if s.strip())
    except ValueError:
        raise ConfigurationError(f"config key 'sigma_grid': cannot read {raw!r} as a comma-separated list") from None
    if not grid:
        raise ConfigurationError("config key 'sigma_grid' is empty")
    return grid


def build(values: dict[str, str], base_dir: Path = Path(".")) -> RunConfig:
    """Typed configuration from raw strings, logging every key that falls back to its default."""
    model_defaults, train_defaults = _defaults(ModelConfig), _defaults(TrainConfig)
    for key in sorted(KNOWN_KEYS - set(values)):
        default = model_defaults.get(key, train_defaults.get(key, _RUN_KEYS.get(key)))
        log.info("config key %r not set; using default %r", key, default)

    model_kw = {k: _convert(k, values[k], MODEL_KEYS[k]) for k in MODEL_KEYS if k in values}
    train_kw = {k: _convert(k, values[k], TRAIN_KEYS[k]) for k in TRAIN_KEYS if k in values}
    run = {k: values.get(k, default) for k, default in _RUN_KEYS.items()}
    if run["task"] not in TASKS:
        raise ConfigurationError(f"config key 'task' must be one of {TASKS}, got {run['task']!r}")

    def path(key):
        return None if run[key] in (None, "", "none") else (base_dir / run[key])

    return RunConfig(
        model=ModelConfig(**model_kw),
        train=TrainConfig(**train_kw),
        task=run["task"],
        train_data=path("train_data"),
        dev_data=path("dev_data"),
        diagnostic_data=path("diagnostic_data"),
        out_dir=base_dir / run["out_dir"],
        sigma_grid=_sigma_grid(run["sigma_grid"]),
    )


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    return build(parse_text(text, str(path)), path.parent)


def format_config(values: dict[str, object]) -> str:
    """Render ``values`` in the config file syntax, keys sorted."""
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (tuple, list)):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
