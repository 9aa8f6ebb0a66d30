"""Run configuration: defaults, file loading, validation, seed fan-out.

A run is configured by a JSON file whose keys override ``DEFAULTS`` block by
block. The master ``seed`` fans out to named per-component streams through a
splitmix64-style hash (see ``derive_seed``) so that, for example, every
experiment arm can share its initialization stream while drawing distinct
training batches.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "model": {
        "grid": 16,
        "channels": 1,
        "patch": 4,
        "dim": 64,
        "heads": 4,
        "vision_blocks": 2,
        "resampler_blocks": 2,
        "lm_blocks": 4,
        "queries": 8,
        "image_slots": 4,
        "cond_dim": 32,
    },
    "diffusion": {
        "steps": 50,
        "beta_min": 1e-4,
        # hot enough that alpha_bar at t=T is ~2e-4, matching the sampler's
        # pure-noise starting distribution at this grid size
        "beta_max": 0.30,
        "blocks": 2,
    },
    "slide_lora": {
        "n": 3,
        "s": 1,
        "rank": 4,
        "alpha": 8.0,
        "gate_hidden": 16,
        "placement": "both",
    },
    "train": {
        "lr_pretrain": 1e-3,
        "lr_finetune": 5e-4,
        "adam_beta1": 0.9,
        "adam_beta2": 0.99,
        "batch": 8,
        "pretrain_steps": 500,
        "finetune_steps": 1600,
        "lambda_gate": 0.1,
        "log_every": 10,
    },
    "data": {
        "train_size": 384,
        "eval_size": 96,
    },
    "experiment": {
        "seeds": [0, 1, 2],
    },
}

_PLACEMENTS = ("vision_encoder", "llm", "both")


def deep_merge(base: dict, override: dict) -> dict:
    """Recursively merge override into a copy of base; scalars replace."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate_config(cfg: dict) -> dict:
    m = cfg["model"]
    _require(m["grid"] >= 1 and m["patch"] >= 1, "grid and patch must be positive")
    _require(m["grid"] % m["patch"] == 0, "patch must divide grid")
    _require(m["dim"] % m["heads"] == 0, "heads must divide dim")
    for key in ("channels", "vision_blocks", "resampler_blocks", "lm_blocks",
                "queries", "image_slots", "cond_dim"):
        _require(m[key] >= 1, f"model.{key} must be >= 1")

    d = cfg["diffusion"]
    _require(d["steps"] >= 1, "diffusion.steps must be >= 1")
    _require(0.0 < d["beta_min"] < d["beta_max"] < 1.0,
             "need 0 < beta_min < beta_max < 1")
    _require(d["blocks"] >= 1, "diffusion.blocks must be >= 1")

    sl = cfg["slide_lora"]
    _require(sl["n"] % 3 == 0, "slide_lora.n must be divisible by 3")
    _require(sl["n"] == 3 * sl["s"], "slide_lora.n must equal 3*s")
    _require(sl["s"] >= 1, "slide_lora.s must be >= 1")
    _require(sl["rank"] >= 1, "slide_lora.rank must be >= 1")
    _require(sl["alpha"] > 0, "slide_lora.alpha must be positive")
    _require(sl["gate_hidden"] >= 1, "slide_lora.gate_hidden must be >= 1")
    _require(sl["placement"] in _PLACEMENTS,
             f"slide_lora.placement must be one of {_PLACEMENTS}")

    t = cfg["train"]
    _require(t["lr_pretrain"] > 0 and t["lr_finetune"] > 0, "learning rates must be positive")
    _require(0.0 <= t["adam_beta1"] < 1.0 and 0.0 <= t["adam_beta2"] < 1.0,
             "adam betas must lie in [0, 1)")
    _require(t["batch"] >= 1, "train.batch must be >= 1")
    _require(t["pretrain_steps"] >= 1 and t["finetune_steps"] >= 1,
             "step counts must be >= 1")
    _require(t["lambda_gate"] >= 0.0, "train.lambda_gate must be >= 0")

    _require(cfg["data"]["train_size"] >= 1, "data.train_size must be >= 1")
    _require(cfg["data"]["eval_size"] >= 1, "data.eval_size must be >= 1")
    _require(len(cfg["experiment"]["seeds"]) >= 1, "experiment.seeds must be non-empty")
    return cfg


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Resolve a full config: DEFAULTS <- file <- explicit overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a JSON object")
        cfg = deep_merge(cfg, raw)
    if overrides:
        cfg = deep_merge(cfg, overrides)
    return validate_config(cfg)


_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 scramble round of a 64-bit value."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def derive_seed(master: int, stream: str) -> int:
    """Per-stream seed: splitmix64 over the master seed then each name byte.

    Distinct stream names give statistically independent seeds; the same
    (master, stream) pair always maps to the same value.
    """
    h = splitmix64(master & _MASK64)
    for byte in stream.encode("utf-8"):
        h = splitmix64(h ^ byte)
    return h


def rng_for(master: int, stream: str) -> np.random.Generator:
    """Numpy generator seeded from a named stream of the master seed."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, stream)))
