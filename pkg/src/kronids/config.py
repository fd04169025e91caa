"""Run configuration: one JSON document, deep-merged over defaults."""
from __future__ import annotations

import copy
import hashlib
import json

TRAIN_DEFAULTS = {
    "batch_size": 1024,
    "lr": 1e-3,
    "weight_decay": 1e-3,
    "epochs": 50,
    "patience": 8,
    "dropout": 0.3,
    "scheduler": "cosine",
    "step_size": 10,
    "gamma": 0.5,
}

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "source": "synthetic",
        "csv": None,
        "schema": None,
        "n_rows": 20000,
        "n_classes": 10,
        "imbalance_ratio": 60.0,
        "n_numeric": 40,
        "n_informative": 20,
        "categorical_dims": [3, 6],
        "separability": 0.35,
        "n_sources": 0,
    },
    "split": {"ratios": [0.70, 0.15, 0.15]},
    "profile": {"top_v": 10},
    "teacher": {**TRAIN_DEFAULTS, "hidden": [512, 256, 128]},
    "shap": {
        "n_samples": 64,
        "background": 100,
        "n_coalitions": None,
        "use_probability": False,
        "mass": 0.95,
        "n_jobs": 1,
    },
    "ablation": {
        "k_grid": [32, 64, 96, 128],
        "tolerance": 0.02,
        "probe_hidden": 64,
    },
    "student": {
        "k": None,
        "hidden": [64, 32],
        # desk-scale splits are small, so the student trains with a smaller
        # batch to get enough optimizer steps per epoch
        "train": {**TRAIN_DEFAULTS, "batch_size": 128},
    },
    "distill": {"temperatures": [2.0, 3.0, 4.0], "alphas": [0.5, 0.7, 0.9], "n_jobs": 1},
    "bench": {"batch_size": 1024, "warmup": 5, "repeats": 50, "reference": "student_fp32"},
}


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = deep_merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_set(expr: str) -> dict:
    """``a.b.c=value`` -> nested dict; value parsed as JSON, else kept as a string."""
    if "=" not in expr:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def resolve(file_cfg: dict | None = None, sets=(), seed: int | None = None) -> dict:
    cfg = deep_merge(DEFAULTS, file_cfg or {})
    for expr in sets:
        cfg = deep_merge(cfg, parse_set(expr))
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def load(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def digest(cfg: dict) -> str:
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()
