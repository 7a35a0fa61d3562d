"""Flat ``key=value`` experiment configuration files.

Every non-blank line is either a ``#`` comment or ``key=value`` where ``key`` is an
:class:`~fedlga_sim.simulation.ExperimentConfig` field name. Missing keys take their
defaults; unknown keys, malformed values and violated invariants raise
:class:`~fedlga_sim.errors.ConfigError` naming the keys involved.
"""

import logging
from collections.abc import Callable
from dataclasses import fields
from enum import Enum
from pathlib import Path
from typing import Any

from fedlga_sim.errors import ConfigError
from fedlga_sim.model import ModelKind
from fedlga_sim.server import Strategy
from fedlga_sim.simulation import DataSourceKind, ExperimentConfig, Participation

logger = logging.getLogger(__name__)

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}
_NONE = {"", "none"}


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    msg = f"expected a boolean, got '{text}'"
    raise ValueError(msg)


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse_optional(text: str) -> Any:
        return None if text.lower() in _NONE else parse(text)

    return parse_optional


def _enum(kind: type[Enum]) -> Callable[[str], Enum]:
    def parse_enum(text: str) -> Enum:
        try:
            return kind(text.lower())
        except ValueError:
            choices = ", ".join(member.value for member in kind)
            msg = f"expected one of {choices}, got '{text}'"
            raise ValueError(msg) from None

    return parse_enum


_PARSERS: dict[str, Callable[[str], Any]] = {
    "n_devices": int,
    "k_selected": int,
    "local_steps": int,
    "batch_size": int,
    "eta_l": float,
    "eta_g": float,
    "gamma": float,
    "rho": float,
    "tau_max": _optional(int),
    "rounds": int,
    "strategy": _enum(Strategy),
    "mu": float,
    "participation": _enum(Participation),
    "model": _enum(ModelKind),
    "hidden_dim": int,
    "data_source": _enum(DataSourceKind),
    "num_classes": int,
    "input_dim": int,
    "samples_per_class": int,
    "test_per_class": int,
    "class_sep": float,
    "noise_sigma": float,
    "idx_images": _optional(str),
    "idx_labels": _optional(str),
    "idx_test_images": _optional(str),
    "idx_test_labels": _optional(str),
    "classes_per_device": int,
    "seed": int,
    "data_seed": int,
    "partition_seed": int,
    "target_accuracy": _optional(float),
    "early_stop": _parse_bool,
    "eval_every": int,
    "workers": _optional(int),
}

CONFIG_KEYS = tuple(item.name for item in fields(ExperimentConfig))


def parse_values(text: str) -> dict[str, Any]:
    """Parse config text into typed values without applying defaults or invariants."""
    values: dict[str, Any] = {}
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            msg = f"line {number}: expected key=value, got '{line}'"
            raise ConfigError(msg)
        if key not in _PARSERS:
            msg = f"line {number}: unknown key '{key}'"
            raise ConfigError(msg, (key,))
        if key in values:
            msg = f"line {number}: key '{key}' is set twice"
            raise ConfigError(msg, (key,))
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            msg = f"line {number}: malformed value for '{key}': {exc}"
            raise ConfigError(msg, (key,)) from exc
    return values


def parse_config(text: str, **overrides: Any) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from config text.

    Args:
        text: Config file contents
        **overrides: Typed values that take precedence over the file (used by CLI flags)

    Returns:
        Validated configuration

    Raises:
        ConfigError: Unknown key, malformed value or invariant violation
    """
    values = parse_values(text)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def _format_value(value: Any) -> str:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(config: ExperimentConfig) -> str:
    """Serialize every set field, one ``key=value`` per line, in field order."""
    lines = []
    for key in CONFIG_KEYS:
        value = getattr(config, key)
        if value is None:
            continue
        lines.append(f"{key}={_format_value(value)}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path | None = None, **overrides: Any) -> ExperimentConfig:
    """Read a config file; ``None`` gives the default configuration."""
    if path is None:
        return parse_config("", **overrides)
    path = Path(path)
    if not path.exists():
        msg = f"config file {path} does not exist"
        raise ConfigError(msg)
    logger.debug("Loading config from %s", path)
    return parse_config(path.read_text(encoding="utf-8"), **overrides)
