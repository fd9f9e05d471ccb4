"""Run configuration: JSON file, strict keys, every default reported."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .codec import GRID_CODEBOOK_SIZES, GRID_R_MS
from .dsp import CLIP_KINDS

OUT_ROOT_ENV = "WAVELM_OUT"


class ConfigError(ValueError):
    """Carries every violation found, not just the first."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _positive(v):
    return _is_num(v) and v > 0


def _nonneg(v):
    return _is_num(v) and v >= 0


def _posint(v):
    return isinstance(v, int) and not isinstance(v, bool) and v > 0


def _nonnegint(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


# (default, predicate, description); None default means required
SCHEMA = {
    "seed": (None, _nonnegint, "nonnegative integer"),
    "out_dir": ("", lambda v: isinstance(v, str), "string"),
    "dataset": {
        "n": (120, _posint, "positive integer"),
        "duration_s": (1.0, _positive, "positive number"),
        "eval_every": (10, _posint, "positive integer"),
        "kinds": (list(CLIP_KINDS),
                  lambda v: isinstance(v, list) and v
                  and all(k in CLIP_KINDS for k in v),
                  f"nonempty subset of {list(CLIP_KINDS)}"),
        "dir": ("", lambda v: isinstance(v, str), "string"),
    },
    "codec": {
        "r_ms": (8, lambda v: v in GRID_R_MS, f"one of {list(GRID_R_MS)}"),
        "codebook_size": (1024, _posint, "positive integer"),
        "latent_dim": (32, _posint, "positive integer"),
        "base_channels": (16, _posint, "positive integer"),
        "residual_blocks": (1, _posint, "positive integer"),
        "ema_decay": (0.99, lambda v: _is_num(v) and 0 <= v < 1, "in [0, 1)"),
        "commitment_beta": (0.25, _nonneg, "nonnegative number"),
        "dead_code_steps": (200, _posint, "positive integer"),
        "train": {
            "steps": (500, _posint, "positive integer"),
            "batch_size": (8, _posint, "positive integer"),
            "crop_samples": (4096, _posint, "positive integer"),
            "lr": (2e-3, _positive, "positive number"),
            "warmup_steps": (50, _nonnegint, "nonnegative integer"),
        },
    },
    "lm": {
        "num_layers": (4, _posint, "positive integer"),
        "num_heads": (4, _posint, "positive integer"),
        "embed_dim": (128, _posint, "positive integer"),
        "ffn_dim": (512, _posint, "positive integer"),
        "max_seq_len": (1024, _posint, "positive integer"),
        "dropout": (0.0, lambda v: _is_num(v) and 0 <= v < 1, "in [0, 1)"),
        "train": {
            "steps": (400, _posint, "positive integer"),
            "batch_size": (8, _posint, "positive integer"),
            "lr": (3e-4, _positive, "positive number"),
            "warmup_steps": (0, _nonnegint, "nonnegative integer"),
            "eval_every": (100, _posint, "positive integer"),
        },
    },
    "sampling": {
        "temperature": (1.0, _nonneg, "nonnegative number"),
        "top_k": (64, _posint, "positive integer"),
        "horizon_tokens": (250, _posint, "positive integer"),
    },
    "eval": {
        "grid": {
            "r_ms": (list(GRID_R_MS),
                     lambda v: isinstance(v, list) and v
                     and all(r in GRID_R_MS for r in v),
                     f"nonempty subset of {list(GRID_R_MS)}"),
            "codebook_size": (list(GRID_CODEBOOK_SIZES),
                              lambda v: isinstance(v, list) and v
                              and all(_posint(k) for k in v),
                              "nonempty list of positive integers"),
        },
        "budgets": {
            "codec_steps": (500, _posint, "positive integer"),
            "eval_clips": (50, _posint, "positive integer"),
            "train_lm_cells": (False, lambda v: isinstance(v, bool), "boolean"),
            "lm_steps": (300, _posint, "positive integer"),
        },
    },
}


@dataclass
class RunConfig:
    data: dict
    applied_defaults: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def out_dir(self) -> Path:
        configured = self.data["out_dir"]
        if configured:
            return Path(configured)
        return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _walk(schema: dict, raw: dict, prefix: str, out: dict, errors: list,
          defaults: list):
    for key, value in raw.items():
        if key not in schema:
            errors.append(f"{prefix}{key}: unknown key")
    for key, spec in schema.items():
        dotted = f"{prefix}{key}"
        if isinstance(spec, dict):
            sub_raw = raw.get(key, {})
            if not isinstance(sub_raw, dict):
                errors.append(f"{dotted}: must be a section (object)")
                sub_raw = {}
            out[key] = {}
            _walk(spec, sub_raw, dotted + ".", out[key], errors, defaults)
            continue
        default, predicate, description = spec
        if key in raw:
            value = raw[key]
            if not predicate(value):
                errors.append(f"{dotted}: expected {description}, got {value!r}")
            else:
                out[key] = value
        elif default is None:
            errors.append(f"{dotted}: required")
        else:
            out[key] = default
            defaults.append(f"{dotted} = {json.dumps(default)} (default)")


def validate_config(path) -> RunConfig:
    """Parse, validate, and normalize; raises ConfigError listing every issue."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError([f"{path}: file not found"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON ({e})"]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    out: dict = {}
    errors: list = []
    defaults: list = []
    _walk(SCHEMA, raw, "", out, errors, defaults)
    if errors:
        raise ConfigError(errors)
    warnings = []
    k = out["codec"]["codebook_size"]
    if k not in GRID_CODEBOOK_SIZES:
        warnings.append(
            f"codec.codebook_size: K={k} outside the standard grid "
            f"{list(GRID_CODEBOOK_SIZES)}")
    for k in out["eval"]["grid"]["codebook_size"]:
        if k not in GRID_CODEBOOK_SIZES:
            warnings.append(
                f"eval.grid.codebook_size: K={k} outside the standard grid "
                f"{list(GRID_CODEBOOK_SIZES)}")
    return RunConfig(out, defaults, warnings)


def default_config() -> dict:
    """A fully-defaulted config dict (seed filled with 0)."""
    out: dict = {}
    errors: list = []
    _walk(SCHEMA, {"seed": 0}, "", out, errors, [])
    return out
