"""Run configuration: flat ``key = value`` sections read with :mod:`configparser`.

Sections: ``[pretrain] [finetune] [augment.pretrain] [augment.finetune] [model] [data]``.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from typing import Optional

from .augment import AugmentSpec, finetune_spec, pretrain_spec
from .errors import ConfigError
from .finetune import FinetuneConfig
from .ssp import SSPConfig
from .vit import PRESETS, ViTConfig


@dataclass
class DataConfig:
    pretrain_path: Optional[str] = None
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    subsample_fraction: Optional[float] = None
    max_folds: Optional[int] = None


@dataclass
class RunConfig:
    pretrain: SSPConfig = field(default_factory=SSPConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    augment_pretrain: AugmentSpec = field(default_factory=pretrain_spec)
    augment_finetune: AugmentSpec = field(default_factory=finetune_spec)
    model: ViTConfig = field(default_factory=ViTConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, pretrain=dataclasses.replace(self.pretrain, seed=seed),
                                   finetune=dataclasses.replace(self.finetune, seed=seed))

    def with_preset(self, name: str) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"[model] preset: unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return dataclasses.replace(self, model=self.model.replace(**PRESETS[name]))

    def to_dict(self) -> dict:
        return {section: dataclasses.asdict(getattr(self, attr)) for section, attr in _SECTIONS.items()}

    def to_ini(self) -> str:
        lines = []
        for section, attr in _SECTIONS.items():
            lines.append(f"[{section}]")
            for f in dataclasses.fields(getattr(self, attr)):
                lines.append(f"{f.name} = {_format(getattr(getattr(self, attr), f.name))}")
            lines.append("")
        return "\n".join(lines)


_SECTIONS = {
    "pretrain": "pretrain",
    "finetune": "finetune",
    "augment.pretrain": "augment_pretrain",
    "augment.finetune": "augment_finetune",
    "model": "model",
    "data": "data",
}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, hint, where: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("", "none"):
            return None
        return _parse(raw, args[0], where)
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is tuple or origin is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def parse_config(text: str) -> RunConfig:
    """Parse config text; missing keys keep their defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from None
    unknown = [s for s in parser.sections() if s not in _SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config section [{unknown[0]}]; allowed: {', '.join(_SECTIONS)}")
    base = RunConfig()
    values = {}
    for section, attr in _SECTIONS.items():
        cls = type(getattr(base, attr))
        hints = typing.get_type_hints(cls)
        current = dataclasses.asdict(getattr(base, attr))
        if section == "model" and parser.has_option(section, "preset"):
            name = parser.get(section, "preset").strip()
            if name not in PRESETS:
                raise ConfigError(f"[model] preset: unknown preset {name!r}")
            current.update(PRESETS[name])
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if section == "model" and key == "preset":
                    continue
                if key not in hints:
                    raise ConfigError(f"[{section}] {key}: unknown key; allowed: {', '.join(hints)}")
                current[key] = _parse(raw, hints[key], f"[{section}] {key}")
        try:
            values[attr] = cls(**current)
        except ConfigError as exc:
            raise ConfigError(f"[{section}] {exc}") from None
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
