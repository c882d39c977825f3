"""
Configuration loading for CoBra runs.

A run configuration is resolved in order: built-in defaults, the JSON config
file, dotted ``key=value`` overrides, then the ``COBRA_SEED`` environment
variable. The result is validated as a ``CobraConfig``.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Union

from pydantic import BaseModel, ValidationError

from .exceptions import ConfigError, OverrideError
from .models import CobraConfig

logger = logging.getLogger(__name__)

SEED_ENV = "COBRA_SEED"
SNAPSHOT_NAME = "resolved_config.json"


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Load a JSON config file into a dict."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (json.JSONDecodeError, OSError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def parse_value(text: str) -> Any:
    """JSON value if ``text`` parses as one, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Apply dotted ``key=value`` overrides, e.g. ``train.loss.tau=0.2``.

    Args:
        data: fully populated config dict (every known key present)
        overrides: override expressions

    Returns:
        New dict with the overrides applied

    Raises:
        OverrideError: On a malformed expression or an unknown key
    """
    result = json.loads(json.dumps(data))
    for expression in overrides:
        key, sep, raw = expression.partition("=")
        key = key.strip()
        if not sep or not key:
            raise OverrideError(f"override '{expression}' is not of the form key=value")
        node = result
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise OverrideError(f"unknown config key '{key}'")
            node = node[part]
        if parts[-1] not in node:
            raise OverrideError(f"unknown config key '{key}'")
        node[parts[-1]] = parse_value(raw.strip())
        logger.debug("override %s = %r", key, node[parts[-1]])
    return result


def validate_config(data: Mapping[str, Any]) -> CobraConfig:
    try:
        return CobraConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}") from e


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    env: Optional[Mapping[str, str]] = None,
) -> CobraConfig:
    """
    Resolve a run configuration.

    Args:
        path: optional JSON config file
        overrides: dotted ``key=value`` expressions
        env: environment mapping, ``os.environ`` when omitted

    Returns:
        Validated CobraConfig
    """
    env = os.environ if env is None else env
    data = CobraConfig().model_dump(mode="json")
    if path is not None:
        data = _merge(data, read_config_file(path))
    data = apply_overrides(data, overrides)

    seed = env.get(SEED_ENV)
    if seed not in (None, ""):
        try:
            data["train"]["rng_seed"] = int(seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got '{seed}'")
        logger.info("rng seed %s taken from %s", seed, SEED_ENV)
    return validate_config(data)


def save_config_snapshot(config: Union[BaseModel, Mapping[str, Any]], out_dir: Union[str, Path]) -> Path:
    """Write ``resolved_config.json`` into ``out_dir`` (created if absent)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = config.model_dump(mode="json") if isinstance(config, BaseModel) else dict(config)
    path = out_dir / SNAPSHOT_NAME
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    return path
