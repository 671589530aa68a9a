"""Flat on-disk run configuration.

A config is a single JSON object.  Unknown keys are rejected, every default
is materialized in the saved copy, and ``mode`` accepts the shorthand
``"fixed_share(n)"``.  ``merge_interval`` is the merge spacing ``m`` (some
hyper-parameter tables call it the merge window).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .adapters import MODES, PROJECTION_TYPES, AdapterConfig, parse_mode
from .errors import ConfigError, ContractError
from .merging import PAIR_SCOPES, MergeSchedule
from .model import ModelConfig
from .tasks import TASK_KINDS, TaskSpec

# synthetic sequences are shorter than the positional table to keep steps cheap
TASK_SEQ_LEN = 16

DEFAULTS: dict[str, Any] = {
    # model
    "num_layers": 12,
    "model_dim": 64,
    "num_heads": 4,
    "ffn_dim": 128,
    "vocab_size": 64,
    "max_seq_len": 32,
    "task_head": None,  # derived from task_kind
    "num_classes": 2,
    # adapters
    "mode": "aslora",
    "share_n": 1,
    "rank": 4,
    "alpha": 8.0,
    "adapted_types": ["query", "value"],
    "a_init_std": None,  # 1/sqrt(rank)
    # schedule and optimizer
    "total_steps": 2000,
    "merge_start": 200,
    "merge_interval": 20,
    "merge_budget": 8,
    "pair_scope": "all_pairs",
    "lr": 3e-3,
    "warmup_steps": 100,
    "batch_size": 32,
    "weight_decay": 0.0,
    "seed": 0,
    "eval_every": 200,
    "checkpoint_every": 0,
    "precision": "float32",
    # task
    "task_kind": "layerwise_probe",
    "num_train": 512,
    "num_eval": 256,
    "noise_rate": 0.0,
    "task_seed": None,  # defaults to seed
    "seq_len": None,  # min(TASK_SEQ_LEN, max_seq_len)
    "probe_depth": 2,
    # reporting
    "run_name": None,
    "compare_pairs": [[2, 6], [3, 8], [6, 10]],
    "compare_steps": None,  # defaults to total_steps
}

_INT = {
    "num_layers", "model_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len", "num_classes",
    "share_n", "rank", "total_steps", "merge_start", "merge_interval", "merge_budget", "warmup_steps",
    "batch_size", "seed", "eval_every", "checkpoint_every", "num_train", "num_eval", "task_seed",
    "seq_len", "probe_depth", "compare_steps",
}
_FLOAT = {"alpha", "a_init_std", "lr", "weight_decay", "noise_rate"}
_CHOICES = {
    "task_head": ("classification", "regression"),
    "pair_scope": PAIR_SCOPES,
    "precision": ("float32", "float64"),
    "task_kind": TASK_KINDS,
}
_NULLABLE = {"task_head", "a_init_std", "task_seed", "seq_len", "run_name", "compare_steps"}


def _check_types(cfg: dict) -> None:
    for key, val in cfg.items():
        if val is None:
            if key not in _NULLABLE:
                raise ConfigError(key, "must not be null")
            continue
        if key in _INT:
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(key, f"expected an integer, got {val!r}")
        elif key in _FLOAT:
            if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
                raise ConfigError(key, f"expected a finite number, got {val!r}")
        elif key in _CHOICES:
            if val not in _CHOICES[key]:
                raise ConfigError(key, f"expected one of {list(_CHOICES[key])}, got {val!r}")
        elif key in ("run_name", "mode") and not isinstance(val, str):
            raise ConfigError(key, f"expected a string, got {val!r}")


def materialize(raw: dict) -> dict:
    """Validate ``raw`` and return a complete config with every default filled in."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(unknown[0], "unknown config key")
    cfg = {**DEFAULTS, **raw}
    _check_types(cfg)

    try:
        mode, n = parse_mode(cfg["mode"])
    except ContractError as exc:
        raise ConfigError("mode", str(exc)) from None
    if mode == "fixed_share" and "(" in cfg["mode"]:
        cfg["share_n"] = n
    cfg["mode"] = mode
    if mode not in MODES:
        raise ConfigError("mode", f"expected one of {MODES}")

    types = cfg["adapted_types"]
    if not isinstance(types, list) or not types or any(t not in PROJECTION_TYPES for t in types) or len(set(types)) != len(types):
        raise ConfigError("adapted_types", f"expected a non-empty subset of {list(PROJECTION_TYPES)}")
    cfg["adapted_types"] = [t for t in PROJECTION_TYPES if t in types]

    derived_head = "regression" if cfg["task_kind"] == "seq_regression" else "classification"
    if cfg["task_head"] is None:
        cfg["task_head"] = derived_head
    elif cfg["task_head"] != derived_head:
        raise ConfigError("task_head", f"task {cfg['task_kind']} needs a {derived_head} head")
    if cfg["task_kind"] == "layerwise_probe":
        cfg["num_classes"] = 2
    if cfg["task_seed"] is None:
        cfg["task_seed"] = cfg["seed"]
    if cfg["seq_len"] is None:
        cfg["seq_len"] = min(TASK_SEQ_LEN, cfg["max_seq_len"])
    if cfg["compare_steps"] is None:
        cfg["compare_steps"] = cfg["total_steps"]

    pairs = cfg["compare_pairs"]
    if not isinstance(pairs, list) or not all(
        isinstance(p, list) and len(p) == 2 and all(isinstance(v, int) and not isinstance(v, bool) for v in p) for p in pairs
    ):
        raise ConfigError("compare_pairs", "expected a list of [share_n, merge_budget] integer pairs")

    L = cfg["num_layers"]
    positive = ("num_layers", "model_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len", "rank",
                "total_steps", "merge_interval", "batch_size", "eval_every", "num_train", "share_n", "seq_len",
                "probe_depth", "compare_steps")
    for key in positive:
        if cfg[key] < 1:
            raise ConfigError(key, "must be positive")
    for key in ("merge_start", "merge_budget", "warmup_steps", "checkpoint_every", "num_eval"):
        if cfg[key] < 0:
            raise ConfigError(key, "must be non-negative")
    if cfg["lr"] <= 0:
        raise ConfigError("lr", "must be positive")
    if cfg["alpha"] < 0 or cfg["weight_decay"] < 0:
        raise ConfigError("alpha" if cfg["alpha"] < 0 else "weight_decay", "must be non-negative")
    if cfg["model_dim"] % cfg["num_heads"]:
        raise ConfigError("num_heads", f"must divide model_dim {cfg['model_dim']}")
    if cfg["rank"] >= cfg["model_dim"]:
        raise ConfigError("rank", f"must be smaller than model_dim {cfg['model_dim']}")
    if cfg["seq_len"] > cfg["max_seq_len"]:
        raise ConfigError("seq_len", "exceeds max_seq_len")
    if cfg["warmup_steps"] > cfg["total_steps"]:
        raise ConfigError("warmup_steps", "exceeds total_steps")
    if cfg["share_n"] > L:
        raise ConfigError("share_n", f"must not exceed num_layers {L}")
    if cfg["merge_budget"] >= L:
        raise ConfigError("merge_budget", f"must be below num_layers {L}")
    if mode == "aslora" and cfg["merge_budget"] > 0:
        last = cfg["merge_start"] + cfg["merge_budget"] * cfg["merge_interval"]
        if cfg["total_steps"] <= last:
            raise ConfigError("total_steps", f"must exceed merge_start + merge_budget * merge_interval = {last}")
    try:
        task_spec(cfg)
    except ContractError as exc:
        raise ConfigError("task_kind", str(exc)) from None
    return cfg


def load_config(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"not valid JSON: {exc}") from None
    return materialize(raw)


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def with_overrides(cfg: dict, **changes) -> dict:
    return materialize({**cfg, **changes})


# -- builders ---------------------------------------------------------------

def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        num_layers=cfg["num_layers"], model_dim=cfg["model_dim"], num_heads=cfg["num_heads"],
        ffn_dim=cfg["ffn_dim"], vocab_size=cfg["vocab_size"], max_seq_len=cfg["max_seq_len"],
        task_head=cfg["task_head"], num_classes=cfg["num_classes"],
    )


def adapter_config(cfg: dict) -> AdapterConfig:
    return AdapterConfig(
        rank=cfg["rank"], alpha=float(cfg["alpha"]), num_layers=cfg["num_layers"], model_dim=cfg["model_dim"],
        adapted_types=tuple(cfg["adapted_types"]), mode=cfg["mode"], share_n=cfg["share_n"],
        a_init_std=cfg["a_init_std"],
    )


def effective_budget(cfg: dict) -> int:
    return cfg["merge_budget"] if cfg["mode"] == "aslora" else 0


def merge_schedule(cfg: dict) -> MergeSchedule:
    return MergeSchedule(cfg["merge_start"], cfg["merge_interval"], effective_budget(cfg), cfg["pair_scope"])


def task_spec(cfg: dict) -> TaskSpec:
    return TaskSpec(
        kind=cfg["task_kind"], num_train=cfg["num_train"], num_eval=cfg["num_eval"],
        noise_rate=float(cfg["noise_rate"]), seed=cfg["task_seed"], seq_len=cfg["seq_len"],
        vocab_size=cfg["vocab_size"], num_classes=cfg["num_classes"], depth=cfg["probe_depth"],
    )


def float_type(cfg: dict):
    return np.float64 if cfg["precision"] == "float64" else np.float32


@dataclass(frozen=True)
class Preset:
    description: str
    values: dict


PRESETS: dict[str, Preset] = {
    "desk": Preset("desk-scale default (12 layers, d=64)", {}),
    "roberta-base": Preset(
        "RoBERTa-base shape for parameter arithmetic (12 layers, d=768, r=8, 7 merges)",
        {"num_layers": 12, "model_dim": 768, "num_heads": 12, "ffn_dim": 3072, "rank": 8, "alpha": 16.0,
         "merge_budget": 7, "compare_pairs": [[2, 6], [3, 8], [6, 10]], "total_steps": 4000,
         "merge_start": 400, "merge_interval": 10},
    ),
    "llama2-7b": Preset(
        "LLaMA-2-7B shape for parameter arithmetic (32 layers, d=4096, r=64, 16 merges)",
        {"num_layers": 32, "model_dim": 4096, "num_heads": 32, "ffn_dim": 11008, "rank": 64, "alpha": 16.0,
         "merge_budget": 16, "compare_pairs": [], "total_steps": 4000, "merge_start": 400, "merge_interval": 10},
    ),
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return materialize(dict(PRESETS[name].values))
