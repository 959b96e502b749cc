import json
import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field

from .errors import InvalidArgumentError
from .models import RunConfig

load_dotenv()

BASE_DIR = Path(__file__).resolve().parent.parent

# Flat CLI flag names that live inside a nested config section
GROUPCAM_KEYS = {"groups", "theta", "ksize", "sigma", "layer_id", "denoise"}


def _env_bool(name: str, default: bool) -> bool:
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in {"1", "true", "yes", "on"}


class Settings(BaseModel):
    log_level: str = "INFO"
    log_json: bool = False
    torch_threads: int = Field(default=0, ge=0)
    output_dir: str = "runs"

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            log_level=os.getenv("GROUPCAM_LOG_LEVEL", "INFO"),
            log_json=_env_bool("GROUPCAM_LOG_JSON", False),
            torch_threads=int(os.getenv("GROUPCAM_TORCH_THREADS", "0")),
            output_dir=os.getenv("GROUPCAM_OUTPUT_DIR", "runs"),
        )


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    """Read a JSON run-config file; a missing path means no file layer"""
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidArgumentError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"config file {path} must hold a JSON object")
    return data


def _nest(values: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in values.items():
        if key in GROUPCAM_KEYS:
            nested.setdefault("groupcam", {})[key] = value
        elif isinstance(value, dict) and isinstance(nested.get(key), dict):
            nested[key] = _merge(nested[key], value)
        else:
            nested[key] = value
    return nested


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_run_config(
    command: str,
    file_values: Optional[Dict[str, Any]] = None,
    flag_values: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Merge run configuration layers: flags > config file > defaults.

    Args:
        command: CLI command name recorded in the config
        file_values: Values read from the --config JSON file
        flag_values: Values given on the command line; None means "not given"

    Returns:
        Fully resolved RunConfig
    """
    layered = _nest(file_values or {})
    flags = _nest({k: v for k, v in (flag_values or {}).items() if v is not None})
    merged = _merge(layered, flags)
    merged["command"] = command
    return RunConfig(**merged)
