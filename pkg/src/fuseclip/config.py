"""Run configuration: one nested key tree with full defaults.

A config file (JSON, UTF-8) and ``key.path=value`` overrides are merged
onto the defaults; any key not present in the default tree is rejected, so
typos fail loudly instead of silently running with defaults. The merged
tree is echoed into each run directory in a canonical byte-stable form.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError
from .losses import AlignmentLossConfig
from .training import DiffusionTrainConfig, PretrainConfig
from .world import WorldSpec, make_world

DEFAULT_CONFIG: dict = {
    "world": {
        "seed": 5,
        "n_identities": 20,
        "vocab_sizes": [16, 4, 4],
        "seen_vocab_sizes": [8, 4, 4],
        "code_dims": [16, 4, 4],
        "d_x": 64,
        "d_id": 16,
        "d_face": 32,
        "caption_len": 8,
        "sigma_x": 0.05,
        "sigma_r": 0.05,
        "min_angle_deg": 10.0,
    },
    "data": {
        "dir": "data",
        "n_main": 2048,
        "n_guided": 512,
        "main_seed": 1,
        "guided_seed": 2,
    },
    "pretrain": {
        "loss": {
            "tau": 0.07,
            "learnable_tau": False,
            "use_image_term": True,
            "use_id_term": True,
            "use_text_term": True,
            "guided_probability": 0.3,
        },
        "batch_size": 64,
        "steps": 2000,
        "learning_rate": 3e-3,
        "seed": 0,
        "n_blocks": 2,
        "n_heads": 1,
        "ff_hidden": 64,
        "sequential_dca": False,
        "grad_clip": 1.0,
        "checkpoint_every": 500,
        "metrics_every": 1,
    },
    "diffusion": {
        "encoder_checkpoint": "untrained",
        "encoder_trainable": False,
        "force_encoder_trainable": False,
        "guided_probability": 0.0,
        "timesteps": 100,
        "schedule_s": 0.008,
        "max_beta": 0.999,
        "hidden": 128,
        "batch_size": 64,
        "steps": 2000,
        "learning_rate": 1e-3,
        "seed": 0,
        "n_blocks": 2,
        "n_heads": 1,
        "ff_hidden": 64,
        "sequential_dca": False,
        "grad_clip": 1.0,
        "checkpoint_every": 500,
        "metrics_every": 1,
    },
    "eval": {
        "seed": 0,
        "n_eval": 2000,
        "n_ids": 20,
        "n_per_id": 25,
        "class_slot": 0,
        "n_gen": 256,
        "clip_x0": 2.0,
        "metrics": ["zero-shot", "cluster"],
        "variants": ["L1", "L2", "L3"],
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def _merge(base: dict, update: dict, path: str) -> None:
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a section, got {value!r}")
            _merge(base[key], value, where)
        else:
            if isinstance(value, dict):
                raise ConfigError(f"{where!r} is a value, not a section")
            base[key] = value


def load_config(path: str | Path | None = None) -> dict:
    """Defaults overlaid with a JSON config file, if one is given."""
    cfg = default_config()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            update = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(update, dict):
            raise ConfigError(f"config file {path} must contain an object")
        _merge(cfg, update, "")
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> None:
    """In-place ``section.key=value`` assignments; values parse as JSON
    with a plain-string fallback, so ``--set data.dir=runs`` needs no
    quoting."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = cfg
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[key]
        leaf = keys[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(node[leaf], dict):
            raise ConfigError(f"{dotted!r} is a section, not a value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        old = node[leaf]
        if isinstance(old, bool) and not isinstance(value, bool):
            raise ConfigError(f"{dotted!r} expects true/false, got {raw!r}")
        if (
            isinstance(old, (int, float))
            and not isinstance(old, bool)
            and not isinstance(value, (int, float))
        ):
            raise ConfigError(f"{dotted!r} expects a number, got {raw!r}")
        node[leaf] = value


def config_text(cfg: dict) -> str:
    """Canonical serialization used for the effective-config echo."""
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def world_from_config(section: dict) -> WorldSpec:
    return make_world(
        seed=section["seed"],
        n_identities=section["n_identities"],
        vocab_sizes=tuple(section["vocab_sizes"]),
        seen_vocab_sizes=tuple(section["seen_vocab_sizes"]),
        code_dims=tuple(section["code_dims"]),
        d_x=section["d_x"],
        d_id=section["d_id"],
        d_face=section["d_face"],
        caption_len=section["caption_len"],
        sigma_x=section["sigma_x"],
        sigma_r=section["sigma_r"],
        min_angle_deg=section["min_angle_deg"],
    )


def pretrain_from_config(section: dict) -> PretrainConfig:
    loss = AlignmentLossConfig(**section["loss"])
    rest = {k: v for k, v in section.items() if k != "loss"}
    return PretrainConfig(loss=loss, **rest)


def diffusion_from_config(section: dict) -> DiffusionTrainConfig:
    return DiffusionTrainConfig(**section)
