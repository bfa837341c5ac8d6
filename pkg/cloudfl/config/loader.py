"""
Experiment config loading.

Config files are dotenv-style `key=value` text. Dotted keys nest:

    seed=7
    rounds=100
    lambda=0.3
    topology.num_clouds=3
    attack.kind=sign_flip

CLI flags arrive as the same dotted keys and win over the file.
"""
import logging
import os
import re
from typing import Any, Dict, Mapping, Optional

from dotenv import dotenv_values
from pydantic import ValidationError

from cloudfl.config.models import ExperimentConfig
from cloudfl.errors import ConfigurationError

logger = logging.getLogger(__name__)

_KEY_LINE = re.compile(r"^\s*(?:export\s+)?([^=#\s]+)\s*(?:=|$)")
_NULL_VALUES = {"", "none", "null"}
FLAG_SOURCE = "<flags>"


def _key_lines(path: str) -> Dict[str, int]:
    """Map every key in the file to the (last) line defining it."""
    lines: Dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            match = _KEY_LINE.match(line)
            if match:
                lines[match.group(1)] = number
    return lines


def _read_file(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ConfigurationError(f"{path}: config file not found")
    raw = dotenv_values(path)
    lines = _key_lines(path)
    flat: Dict[str, Any] = {}
    for key, value in raw.items():
        if value is None:
            raise ConfigurationError(f"{path}:{lines.get(key, '?')}: {key}: expected key=value")
        flat[key] = None if value.strip().lower() in _NULL_VALUES else value.strip()
    return flat


def _nest(flat: Mapping[str, Any], sources: Mapping[str, str]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError(f"{sources.get(key, FLAG_SOURCE)}: {key}: '{part}' is not a section")
            node = child
        if isinstance(node.get(leaf), dict):
            raise ConfigurationError(f"{sources.get(key, FLAG_SOURCE)}: {key}: is a section, not a value")
        node[leaf] = value
    return nested


def _anchor(key: str, sources: Mapping[str, str]) -> str:
    """`path:line` of the key (or of the first key inside that section)."""
    if key in sources:
        return sources[key]
    for candidate, where in sources.items():
        if key and candidate.startswith(key + "."):
            return where
    return next(iter(sources.values()), FLAG_SOURCE).split(":")[0]


def _format_errors(error: ValidationError, sources: Mapping[str, str]) -> str:
    messages = []
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"])
        if key == "lam":
            key = "lambda"
        if item["type"] == "missing":
            messages.append(f"{_anchor('', sources)}: missing required field '{key}'")
        else:
            messages.append(f"{_anchor(key, sources)}: {key or '<root>'}: {item['msg']}")
    return "\n".join(messages)


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Read a config file, apply flag overrides, validate."""
    flat: Dict[str, Any] = {}
    sources: Dict[str, str] = {}

    if path:
        flat.update(_read_file(path))
        lines = _key_lines(path)
        sources.update({key: f"{path}:{lines.get(key, '?')}" for key in flat})

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        flat[key] = value
        sources[key] = FLAG_SOURCE

    try:
        config = ExperimentConfig.model_validate(_nest(flat, sources))
    except ValidationError as e:
        raise ConfigurationError(_format_errors(e, sources)) from e

    logger.info(f"[Config] Loaded '{config.name}' (seed={config.seed}, rounds={config.rounds}, strategy={config.strategy.value})")
    return config
