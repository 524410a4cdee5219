"""
JSON configuration files and environment overrides.

A config file is deep-merged over the defaults of a config dataclass
(anything with to_dict/from_dict); keys the dataclass does not know are
rejected. Runtime knobs come from the environment, optionally via a .env
file:

    PARTPARSE_NUM_THREADS   torch intra-op threads
    PARTPARSE_DEVICE        torch device string (default "cpu")
"""

import json
import os
from typing import Any, Dict, Mapping, Optional

from dotenv import load_dotenv

load_dotenv()


def env_num_threads() -> Optional[int]:
    value = os.getenv("PARTPARSE_NUM_THREADS")
    if not value:
        return None
    try:
        threads = int(value)
    except ValueError:
        raise ValueError(f"PARTPARSE_NUM_THREADS must be an integer, got {value!r}")
    if threads < 1:
        raise ValueError(f"PARTPARSE_NUM_THREADS must be >= 1, got {threads}")
    return threads


def env_device(default: str = "cpu") -> str:
    return os.getenv("PARTPARSE_DEVICE") or default


def deep_merge(base: Mapping, override: Mapping, path: str = "") -> Dict:
    """Recursively overlay `override` on `base`, rejecting unknown keys."""
    merged = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ValueError(f"unknown config key: {where}")
        if isinstance(base[key], Mapping) and isinstance(value, Mapping):
            merged[key] = deep_merge(base[key], value, where)
        else:
            merged[key] = value
    return merged


def read_json(path: str) -> Dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, "r") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path} must contain a JSON object")
    return data


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None, config_cls=None):
    """Resolve a config: dataclass defaults < file < overrides.

    Args:
        path: Optional JSON config file
        overrides: Nested mapping applied last (e.g. from CLI flags)
        config_cls: Config dataclass, TrainConfig by default

    Returns:
        An instance of config_cls
    """
    if config_cls is None:
        from src.training.config import TrainConfig

        config_cls = TrainConfig
    data = config_cls().to_dict()
    if path:
        data = deep_merge(data, read_json(path))
    if overrides:
        data = deep_merge(data, overrides)
    return config_cls.from_dict(data)


def archive_config(config, out_dir: str, name: str = "config.json") -> str:
    """Write the resolved config beside a run's outputs."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2)
    return path
