"""Run configuration: a plain-text key=value file plus CLI overrides.

Keys are namespaced by owning module (``filter.*``, ``shadow.*``,
``train.*``, ``eval.*``); '#' starts a comment. Precedence is
flag > file > default. Unknown keys are rejected, and values are validated
by the owning dataclass.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .metrics import EvalConfig
from .nn.train import TrainConfig
from .shadow import ShadowConfig
from .spectral import FilterConfig

_SECTIONS = {
    "filter": FilterConfig,
    "shadow": ShadowConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    filter: FilterConfig
    shadow: ShadowConfig
    train: TrainConfig
    eval: EvalConfig


def _coerce(cls, field_name: str, raw: str):
    for f in dataclasses.fields(cls):
        if f.name == field_name:
            base = cls()
            current = getattr(base, f.name)
            if isinstance(current, bool):
                if raw.lower() in ("1", "true", "yes", "on"):
                    return True
                if raw.lower() in ("0", "false", "no", "off"):
                    return False
                raise ConfigError(f"cannot parse boolean from {raw!r}")
            if isinstance(current, int):
                return int(raw)
            if isinstance(current, float):
                return float(raw)
            if isinstance(current, tuple):
                parts = raw.replace(",", " ").split()
                return tuple(type(current[0])(p) for p in parts)
            return raw
    raise ConfigError(f"unknown key {field_name!r} for section {cls.__name__}")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse key=value lines into a flat dict of namespaced keys."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve_config(path: str | Path | None = None,
                   overrides: dict[str, str] | None = None) -> RunConfig:
    """Build the full configuration from defaults, file, then overrides."""
    merged: dict[str, str] = {}
    if path is not None:
        merged.update(parse_config_text(Path(path).read_text(), source=str(path)))
    if overrides:
        merged.update(overrides)

    section_kwargs: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, raw in merged.items():
        if "." not in key:
            raise ConfigError(f"key {key!r} is not namespaced (expected section.key)")
        section, _, field_name = key.partition(".")
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
        section_kwargs[section][field_name] = _coerce(cls, field_name, raw)

    return RunConfig(
        filter=FilterConfig(**section_kwargs["filter"]),
        shadow=ShadowConfig(**section_kwargs["shadow"]),
        train=TrainConfig(**section_kwargs["train"]),
        eval=EvalConfig(**section_kwargs["eval"]),
    )


def parse_override_args(pairs: list[str]) -> dict[str, str]:
    """Turn repeated ``--set section.key=value`` arguments into a dict."""
    out: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out
