"""Experiment configuration: one JSON document, every module default overridable."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from cuevis.scene.dataset import DatasetConfig

SECTIONS = ("dataset", "estimator", "nerf_pretrain", "cue_train", "eval")
SEED_MAX = 2**64 - 1

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "n_images": 2000,
        "split": [0.9, 0.05, 0.05],
        "distance": [6.0, 14.0],
        "margin_px": 10.0,
        "light_cone_deg": 60.0,
    },
    "estimator": {
        "heads": "heatmap+pose",
        "steps": 16000,
        "batch_size": 8,
        "lr": 1e-3,
        "w_heatmap": 1.0,
        "w_pose": 1.0,
        "sigma_px": 2.0,
        "augment": False,
    },
    "nerf_pretrain": {
        "n_train": 200,
        "n_heldout": 20,
        "light_cone_deg": 0.0,
        "steps": 2000,
        "batch_rays": 1024,
        "lr_planes": 1e-2,
        "lr_mlp": 1e-3,
        "refresh_every": 100,
        "resolution": 64,
        "features": 16,
        "hidden": 64,
        "grid_resolution": 32,
        "n_coarse": 32,
        "n_fine": 32,
    },
    "cue_train": {
        "accumulation_steps": 10,
        "total_steps": 10000,
        "w_heatmap": 0.01,
        "w_pose": 0.01,
        "supervision": "combined",
        "encoding": "frozen",
        "lr_planes": 1e-2,
        "lr_mlp": 1e-3,
        "betas": [0.9, 0.999],
        "dilation_px": 2,
        "sampler_refresh": 100,
        "jitter": True,
    },
    "eval": {
        "poses": "grid32",
        "grid_columns": 4,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = _coerce(base[key], value, where)
    return out


def _coerce(default, value, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{where} must be a list of {len(default)} values, got {value!r}")
        return [_coerce(d, v, f"{where}[{i}]") for i, (d, v) in enumerate(zip(default, value))]
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")
    return value


def parse_assignment(text: str) -> dict:
    """``section.key=value`` into a nested override; the value is JSON when it parses."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad config key {key!r}")
    out: dict = {}
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def resolve_config(path=None, assignments=(), seed=None) -> dict:
    """Defaults, then the JSON file, then ``--set`` overrides, then ``--seed``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, doc)
    for text in assignments:
        cfg = _merge(cfg, parse_assignment(text))
    if seed is not None:
        cfg["seed"] = seed
    if not 0 <= int(cfg["seed"]) <= SEED_MAX:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {cfg['seed']}")
    return cfg


def section_hash(cfg: dict, *sections: str) -> str:
    """Short content hash of the named sections plus the seed."""
    doc = {s: cfg[s] for s in sections}
    doc["seed"] = cfg["seed"]
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def dataset_config(cfg: dict) -> DatasetConfig:
    d = cfg["dataset"]
    return DatasetConfig(
        split=tuple(d["split"]), distance=tuple(d["distance"]), margin_px=d["margin_px"], light_cone_deg=d["light_cone_deg"]
    )
