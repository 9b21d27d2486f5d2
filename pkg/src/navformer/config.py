"""Run configuration: a single JSON file, schema-validated, with CLI
overrides. The fully resolved config is persisted next to every output."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional

import jsonschema

from .envsim import EpisodeSuite
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad run configuration (schema violation, unknown key, bad value)."""


MODEL_KEYS = {
    "hidden": {"type": "integer", "minimum": 1},
    "n_heads": {"type": "integer", "minimum": 1},
    "head_dim": {"type": "integer", "minimum": 1},
    "ffn_dim": {"type": "integer", "minimum": 1},
    "n_layers": {"type": "integer", "minimum": 1},
    "max_lang_len": {"type": "integer", "minimum": 4},
    "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "variant": {"enum": ["one_stream", "two_stream"]},
    "lang_attn_policy": {"enum": ["init_only", "emb_attn", "init_attn", "re_attn"]},
    "cross_modal_matching": {"type": "boolean"},
    "task": {"enum": ["r2r", "reverie"]},
    "n_lang_layers": {"type": "integer", "minimum": 1},
    "n_cross_layers": {"type": "integer", "minimum": 1},
    "n_vis_layers": {"type": "integer", "minimum": 1},
}

TRAIN_KEYS = {
    "il_weight": {"type": "number", "minimum": 0},
    "discount": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "batch_size": {"type": "integer", "minimum": 1},
    "rl_fraction": {"type": "number", "minimum": 0, "maximum": 1},
    "iterations": {"type": "integer", "minimum": 1},
    "grad_accum_steps": {"type": "integer", "minimum": 1},
    "use_ndtw_reward": {"type": "boolean"},
    "use_stop_penalty": {"type": "boolean"},
    "reward_sign_verbatim": {"type": "boolean"},
    "critic_detached": {"type": "boolean"},
    "critic_weight": {"type": "number", "minimum": 0},
    "max_steps": {"type": "integer", "minimum": 1},
    "eval_every": {"type": "integer", "minimum": 1},
    "checkpoint_every": {"type": "integer", "minimum": 1},
    "weight_decay": {"type": "number", "minimum": 0},
    "grad_clip": {"type": "number", "minimum": 0},
    "ndtw_threshold": {"type": "number", "exclusiveMinimum": 0},
    "sample_mode": {"enum": ["sample", "greedy"]},
}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["train_suite"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "train_suite": {"type": "string"},
        "val_suite": {"type": ["string", "null"]},
        "model": {"type": "object", "additionalProperties": False,
                  "properties": MODEL_KEYS},
        "train": {"type": "object", "additionalProperties": False,
                  "properties": TRAIN_KEYS},
    },
}


def env_seed_fallback() -> Optional[int]:
    raw = os.environ.get("RVB_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"RVB_SEED={raw!r} is not an integer")


def load_run_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    validate_run_config(data, where=str(path))
    return data


def validate_run_config(data: dict, where: str = "config") -> None:
    try:
        jsonschema.validate(data, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "top level"
        raise ConfigError(f"{where}: {exc.message} (at {loc})")


def resolve_seed(cli_seed: Optional[int], config: dict) -> int:
    if cli_seed is not None:
        return cli_seed
    if "seed" in config:
        return int(config["seed"])
    fallback = env_seed_fallback()
    if fallback is not None:
        return fallback
    raise ConfigError("no seed given (flag, config key, or RVB_SEED)")


def model_config_for_suite(suite: EpisodeSuite, model_section: dict) -> ModelConfig:
    """Instantiate the model configuration with suite-derived dimensions."""
    env = suite.env
    kwargs = dict(model_section)
    kwargs["vocab_size"] = len(suite.vocab)
    kwargs["scene_feat_dim"] = env.feat_dim
    kwargs["obj_feat_dim"] = env.feat_dim
    kwargs["dir_dim"] = env.dir_dim
    if suite.mode == "reverie":
        kwargs.setdefault("task", "reverie")
    if kwargs.get("task", "r2r") != suite.mode:
        raise ConfigError(
            f"model task {kwargs.get('task')!r} does not match suite mode "
            f"{suite.mode!r}")
    max_instr = max((len(e.instruction) for e in suite.episodes), default=0) + 2
    if kwargs.get("max_lang_len", ModelConfig.__dataclass_fields__["max_lang_len"].default) < max_instr:
        kwargs["max_lang_len"] = max_instr
    try:
        return ModelConfig(**kwargs)
    except Exception as exc:
        raise ConfigError(str(exc))


def train_config(train_section: dict) -> TrainConfig:
    try:
        return TrainConfig(**train_section)
    except TypeError as exc:
        raise ConfigError(str(exc))
    except Exception as exc:
        raise ConfigError(str(exc))


def write_resolved(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=1, sort_keys=True)
        fh.write("\n")
