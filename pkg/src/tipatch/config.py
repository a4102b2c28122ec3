"""Run configuration: a JSON document with sections metric/train/losses/camsim/eval/io.

Every key is optional; unknown keys are rejected so that a typo never
silently falls back to a default.  Precedence is command-line flag over
config file over the defaults below.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

DEFAULTS = {
    "metric": {
        "name": "proxy",
        "weights": None,
    },
    "train": {
        "variant": "baseline",
        "patch_size": 100,
        "batch_size": 16,
        "iterations": 2000,
        "step": 1.0 / 255.0,
        "optimizer": "sign",
        "cosine": True,
        "seed": 0,
        "relight_max_delta": 0.2,
        "val_every": 50,
        "threads": 1,
    },
    "losses": {
        "lambda_tv": 1e-4,
        "lambda_nps": 10.0,
        "palette_path": None,
    },
    "camsim": {
        "stages": [],
        "distances": {"near": 1.0, "mid": 0.88, "far": 0.79},
    },
    "eval": {
        "protocol": "image-random",
        "rotation": None,
        "seed": 0,
        "tile_region": None,
        "tile_gap": 0,
        "crop_partial": True,
    },
    "io": {
        "figures": True,
    },
}


class ConfigError(ValueError):
    pass


def merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("distances",):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (flag values; None = unset)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = merge(cfg, doc)
    for dotted, val in (overrides or {}).items():
        if val is None:
            continue
        section, key = dotted.split(".", 1)
        cfg = merge(cfg, {section: {key: val}})
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
