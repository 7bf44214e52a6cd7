"""Run configuration: defaults, merging and validation of user JSON."""

from __future__ import annotations

import copy
import json
from pathlib import Path

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "train_families": 40,
        "heldout_families": 3,
        "train_seed_base": 1000,
        "heldout_seed_base": 9000,
        "train_samples": 16,
        "heldout_samples": 24,
        "n_context_pool": 16,
        "n_eval": 8,
    },
    "family": {
        "shape": [32, 32, 32],
        "n_distractors": [1, 2],
        "noise": 0.04,
        "smoothing": 3.0,
        "fraction_range": [0.02, 0.10],
        "max_retries": 20,
        "level_jitter": 0.0,
        "bias_field": 0.0,
        "guard": 2,
        "min_gap": 0.3,
        "layout": False,
        "layout_spread": 0.12,
        "displacement": 1.5,
    },
    "model": {
        "levels": 3,
        "base_channels": 8,
        "input_shape": None,  # None: follow family.shape
        "fusion": "mean",
        "context_minibatch": 4,
        "prompt_type": "box",
    },
    "train": {
        "steps": 2000,
        "learning_rate": 1e-3,
        "optimizer": "adam",
        "L_range": [1, 8],
        "P_range": [1, 5],
        "targets_per_step": 2,
        "smooth_l1_beta": 0.1,
        "loss": "volume_smooth_l1",
        "grad_clip": 1.0,
        "lr_schedule": "cosine",
        "min_lr_ratio": 0.05,
        "checkpoint_interval": 500,
    },
    "eval": {
        "n_runs": 8,
        "L": 8,
        "P": 5,
        "threshold": 0.5,
        "sizes": [1, 2, 4, 8, 16],
        "prompt_counts": [1, 2, 5],
    },
    "efficiency": {
        "t_point": 5,
        "t_box": 10,
        "t_mask2d": 80,
        "t_mask3d": 1600,
    },
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _kind(v):
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, (int, float)):
        return "number"
    if isinstance(v, str):
        return "string"
    if isinstance(v, list):
        return "list"
    if isinstance(v, dict):
        return "object"
    return "null"


def _merge(base: dict, user: dict, prefix: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        ref = base[key]
        if isinstance(ref, dict):
            if not isinstance(value, dict):
                raise ConfigError(path, f"expected an object, got {_kind(value)}")
            out[key] = _merge(ref, value, path + ".")
            continue
        if ref is not None and value is not None and _kind(ref) != _kind(value):
            raise ConfigError(path, f"expected {_kind(ref)}, got {_kind(value)}")
        if isinstance(ref, int) and not isinstance(ref, bool) and isinstance(value, float) \
                and not value.is_integer():
            raise ConfigError(path, "expected an integer")
        if isinstance(ref, list) and len(value) != len(ref) and key not in ("sizes", "prompt_counts"):
            raise ConfigError(path, f"expected {len(ref)} entries, got {len(value)}")
        out[key] = value
    return out


def resolve(user: dict | None = None, seed: int | None = None) -> dict:
    """Defaults overlaid with ``user``; raises ConfigError naming the offending key."""
    if user is None:
        user = {}
    if not isinstance(user, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    cfg = _merge(DEFAULTS, user, "")
    if seed is not None:
        cfg["seed"] = seed
    if cfg["model"]["input_shape"] is None:
        cfg["model"]["input_shape"] = list(cfg["family"]["shape"])
    return cfg


def load(path) -> dict:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<json>", f"{p} is not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    return data


def snapshot(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True))
    return path
