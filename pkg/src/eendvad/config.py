"""Flat ``section.key = value`` experiment configs.

Sections: ``sim`` (DialogueConfig), ``model`` (ModelConfig), ``train``
(TrainConfig), ``score`` (ScoreConfig) and ``paths``. Unknown keys are errors.
"""

from __future__ import annotations

import copy
import typing
from dataclasses import dataclass, field, fields

from .model import ModelConfig
from .simulate import DialogueConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScoreConfig:
    collar: float = 0.25
    threshold: float = 0.5
    median_window: int | None = None
    skip_overlap: bool = False


@dataclass
class PathsConfig:
    out_dir: str = "exp"
    manifest: str | None = None


@dataclass
class ExperimentConfig:
    sim: DialogueConfig = field(default_factory=DialogueConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.partition(".")
        target = getattr(self, section, None) if section in SECTIONS else None
        if target is None or name not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        hint = typing.get_type_hints(type(target))[name]
        setattr(target, name, _coerce(raw, hint, key))

    def dumps(self) -> str:
        lines = []
        for section in SECTIONS:
            for f in fields(getattr(self, section)):
                value = getattr(getattr(self, section), f.name)
                lines.append(f"{section}.{f.name} = {_render(value)}")
        return "\n".join(lines) + "\n"


SECTIONS = ("sim", "model", "train", "score", "paths")


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, hint, key: str):
    raw = raw.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if raw.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = copy.deepcopy(base) if base else ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        try:
            cfg.set(key.strip(), value)
        except ConfigError as err:
            raise ConfigError(f"line {lineno}: {err}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return parse_config(f.read())
