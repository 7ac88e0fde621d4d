"""Flat JSON configuration loading with seed and worker precedence rules."""

from __future__ import annotations

from dataclasses import fields, replace
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Mapping

from mkdvlab.errors import ConfigError
from mkdvlab.models import EXPERIMENTS, INITIAL_MODES, RunConfig

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "MKDV_SEED"
MAX_SEED = 2**64 - 1

_INT_KEYS = {"n", "K", "n_samples", "seed", "wave_number", "n_records", "mc_max_N", "workers"}
_FLOAT_KEYS = {"R", "t", "dt", "radius", "amplitude", "h"}
_INT_LIST_KEYS = {"N_ladder", "j"}
_FLOAT_LIST_KEYS = {"s_values"}
_STR_LIST_KEYS = {"family", "kind"}
_STR_KEYS = {"experiment", "output_dir", "mode", "field_json"}
_BOOL_KEYS = {"strict", "verbose"}
_NULLABLE_KEYS = {"K", "dt", "radius", "h", "field_json"}


def load_run_config(
    path: Path,
    experiment: str,
    seed_override: int | None = None,
    workers_override: int | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Read a config file (or a saved run.json) and apply env/flag overrides."""
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"Cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc

    if isinstance(payload, dict) and "tool_version" in payload and isinstance(payload.get("config"), dict):
        logger.info("Reading embedded config from manifest %s", path)
        payload = payload["config"]

    config = parse_run_config(payload, experiment)
    env = os.environ if environ is None else environ
    env_seed = env.get(SEED_ENV_VAR)
    if env_seed is not None and env_seed.strip():
        config = replace(config, seed=_parse_seed(env_seed, SEED_ENV_VAR))
    if seed_override is not None:
        config = replace(config, seed=_parse_seed(str(seed_override), "--seed"))
    if workers_override is not None:
        config = replace(config, workers=workers_override)
    validate_run_config(config)
    return config


def parse_run_config(payload: Any, experiment: str) -> RunConfig:
    """Convert a flat JSON object to a RunConfig, rejecting unknown or nested keys."""
    if not isinstance(payload, dict):
        raise ConfigError("Config must be a JSON object.")
    known = {item.name for item in fields(RunConfig)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")

    values: dict[str, Any] = {}
    for key, raw in payload.items():
        values[key] = _coerce(key, raw)

    declared = values.get("experiment")
    if declared not in (None, "", experiment):
        raise ConfigError(
            f"Config declares experiment '{declared}' but subcommand '{experiment}' was requested."
        )
    values["experiment"] = experiment
    return RunConfig(**values)


def validate_run_config(config: RunConfig) -> None:
    if config.experiment not in EXPERIMENTS:
        raise ConfigError(f"Unknown experiment '{config.experiment}'.")
    if config.n < 1:
        raise ConfigError("n must be at least 1.")
    if not config.N_ladder or any(value < 1 for value in config.N_ladder):
        raise ConfigError("N_ladder must be a non-empty list of positive integers.")
    if config.K is not None and config.K < 0:
        raise ConfigError("K must be non-negative.")
    if config.n_samples < 1:
        raise ConfigError("n_samples must be positive.")
    if config.dt is not None and config.dt <= 0:
        raise ConfigError("dt must be positive.")
    if config.R <= 0:
        raise ConfigError("R must be positive.")
    if config.h is not None and config.h <= 0:
        raise ConfigError("h must be positive.")
    if config.radius is not None and (math.isnan(config.radius) or config.radius < 0):
        raise ConfigError("radius must be non-negative.")
    if config.workers < 1:
        raise ConfigError("workers must be at least 1.")
    if config.n_records < 2:
        raise ConfigError("n_records must be at least 2.")
    if config.mode not in INITIAL_MODES:
        raise ConfigError(f"mode must be one of: {', '.join(INITIAL_MODES)}.")
    if config.mode == "file" and not config.field_json:
        raise ConfigError("mode 'file' requires field_json.")
    if any(value not in (3, 5) for value in config.j):
        raise ConfigError("j entries must be 3 or 5.")
    if not 0 <= config.seed <= MAX_SEED:
        raise ConfigError("seed must be a 64-bit non-negative integer.")


def config_to_dict(config: RunConfig) -> dict[str, Any]:
    """Flat JSON-ready dictionary; the inverse of parse_run_config."""
    result: dict[str, Any] = {}
    for item in fields(RunConfig):
        value = getattr(config, item.name)
        result[item.name] = list(value) if isinstance(value, tuple) else value
    return result


def _coerce(key: str, raw: Any) -> Any:
    if isinstance(raw, dict):
        raise ConfigError(f"Config key '{key}' must not be nested.")
    if raw is None:
        if key in _NULLABLE_KEYS:
            return None
        raise ConfigError(f"Config key '{key}' must not be null.")
    if key in _INT_KEYS:
        return _as_int(key, raw)
    if key in _FLOAT_KEYS:
        return _as_float(key, raw)
    if key in _BOOL_KEYS:
        if not isinstance(raw, bool):
            raise ConfigError(f"Config key '{key}' must be a boolean.")
        return raw
    if key in _STR_KEYS:
        if not isinstance(raw, str):
            raise ConfigError(f"Config key '{key}' must be a string.")
        return raw
    items = raw if isinstance(raw, list) else [raw]
    if any(isinstance(item, (list, dict)) for item in items):
        raise ConfigError(f"Config key '{key}' must be a flat list.")
    if key in _INT_LIST_KEYS:
        return tuple(_as_int(key, item) for item in items)
    if key in _FLOAT_LIST_KEYS:
        return tuple(_as_float(key, item) for item in items)
    if key in _STR_LIST_KEYS:
        if not all(isinstance(item, str) for item in items):
            raise ConfigError(f"Config key '{key}' must hold strings.")
        return tuple(items)
    raise ConfigError(f"Unknown config key '{key}'.")


def _as_int(key: str, raw: Any) -> int:
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise ConfigError(f"Config key '{key}' must be an integer.")
    return raw


def _as_float(key: str, raw: Any) -> float:
    if isinstance(raw, str) and raw.strip().lower() in {"inf", "infinity"}:
        return math.inf
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ConfigError(f"Config key '{key}' must be a number.")
    return float(raw)


def _parse_seed(text: str, source: str) -> int:
    try:
        value = int(text.strip(), 0)
    except ValueError as exc:
        raise ConfigError(f"{source} must be an integer seed, got '{text}'.") from exc
    if not 0 <= value <= MAX_SEED:
        raise ConfigError(f"{source} must be a 64-bit non-negative integer.")
    return value
