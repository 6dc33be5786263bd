"""Run configuration: documented schema, defaults, validation, file
loading with command-line overrides, and the resolved snapshot every
command writes next to its outputs.

The schema is the nested ``DEFAULTS`` dict below; see docs/config.md for
field-by-field documentation.  Unknown keys are errors, as are values
whose type disagrees with the default.
"""

from __future__ import annotations

import copy
import json

from .model import ModelConfig
from .trainer import TrainConfig, model_config_from_dict


class ConfigError(Exception):
    pass


DEFAULTS = {
    "seed": 0,
    "data": {
        "corpus": None,
        "n_utterances": 256,
        "d_x": 8,
        "n_phones": 12,
        "n_speakers": 6,
        "min_len": 40,
        "max_len": 120,
        "segment_mean": 8.0,
        "noise_scale": 0.3,
        "speaker_scale": 0.5,
    },
    "model": {
        "d": 64,
        "heads": 4,
        "ffn": 256,
        "encoder_layers": 4,
        "decoder_layers": 2,
        "conv_kernel": 15,
        "conv_groups": 4,
        "vocab": 32,
        "n_targets": 2,
        "code_decay": 0.9,
        "teacher_start": 0.9997,
        "teacher_end": 1.0,
        "teacher_ramp": None,
        "mask_prob": 0.08,
        "mask_span": 10,
        "sigma_min": 1e-5,
        "precision": "f32",
    },
    "training": {
        "total_steps": 2000,
        "warmup_steps": 100,
        "peak_lr": 2e-4,
        "lambda_dec": 0.25,
        "batch_size": 8,
        "clip_norm": 1.0,
        "beta1": 0.9,
        "beta2": 0.98,
        "adam_eps": 1e-6,
        "crop_len": 100,
        "finetune_scope": None,
        "finetune_lr_tts": 1e-5,
        "finetune_lr_tokenize": 1e-4,
        "cond_dropout": 0.2,
        "prompt_frac_lo": 0.7,
        "prompt_frac_hi": 1.0,
    },
    "sampling": {
        "step_size": 0.0625,
        "guidance": 1.9,
        "guidance_formula": "standard",
    },
    "tokenize": {
        "k_semantic": 32,
        "k_residual": 32,
        "residual": False,
        "semantic_layer": None,
        "frame_rate_hz": 50.0,
        "kmeans_max_iter": 100,
    },
    "analysis": {
        "k": 32,
        "kmeans_max_iter": 100,
    },
}

# keys whose default is None, with the type they take when set
_NULLABLE = {
    "data.corpus": str,
    "model.teacher_ramp": int,
    "training.finetune_scope": str,
    "tokenize.semantic_layer": int,
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        current = base[key]
        if isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here!r} must be a section, got {type(value).__name__}")
            _merge(current, value, here)
            continue
        base[key] = _check_type(here, value, current)


def _check_type(path: str, value, default):
    if value is None:
        if path in _NULLABLE:
            return None
        raise ConfigError(f"{path!r} may not be null")
    if default is None:
        expected = _NULLABLE[path]
        if expected is int and isinstance(value, bool):
            raise ConfigError(f"{path!r} expects {expected.__name__}, got bool")
        if not isinstance(value, expected):
            raise ConfigError(f"{path!r} expects {expected.__name__}, got {type(value).__name__}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path!r} expects bool, got {type(value).__name__}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path!r} expects int, got {type(value).__name__}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path!r} expects float, got {type(value).__name__}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path!r} expects str, got {type(value).__name__}")
        return value
    raise ConfigError(f"{path!r}: unsupported schema type {type(default).__name__}")


def apply_override(config: dict, assignment: str) -> None:
    """Apply one 'dotted.key=value' override; values parse as JSON, falling
    back to a bare string."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = {}
    leaf = node
    parts = key.split(".")
    for part in parts[:-1]:
        leaf[part] = {}
        leaf = leaf[part]
    leaf[parts[-1]] = value
    _merge(config, node)


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the config file, then command-line overrides."""
    config = default_config()
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must contain a JSON object")
        _merge(config, user)
    for assignment in overrides:
        apply_override(config, assignment)
    return config


def resolve(config: dict) -> dict:
    """Fill derived values; the result is what gets written next to outputs."""
    out = copy.deepcopy(config)
    if out["model"]["teacher_ramp"] is None:
        out["model"]["teacher_ramp"] = max(1, (2 * out["training"]["total_steps"]) // 3)
    lo, hi = out["training"]["prompt_frac_lo"], out["training"]["prompt_frac_hi"]
    if not 0.0 < lo <= hi <= 1.0:
        raise ConfigError(f"prompt fraction range [{lo}, {hi}] is invalid")
    return out


def save_resolved(config: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")


def build_model_config(config: dict) -> ModelConfig:
    try:
        return model_config_from_dict(
            config["model"], config["data"]["d_x"], config["data"]["n_phones"]
        )
    except ValueError as e:
        raise ConfigError(str(e))


def build_train_config(config: dict, phase: str) -> TrainConfig:
    t = config["training"]
    if phase == "finetune-tts":
        peak, scope_default = t["finetune_lr_tts"], "full"
    elif phase == "finetune-tokenize":
        peak, scope_default = t["finetune_lr_tokenize"], "decoder"
    else:
        peak, scope_default = t["peak_lr"], "decoder"
    try:
        return TrainConfig(
            total_steps=t["total_steps"],
            warmup_steps=t["warmup_steps"],
            peak_lr=peak,
            lambda_dec=t["lambda_dec"],
            batch_size=t["batch_size"],
            clip_norm=t["clip_norm"],
            seed=config["seed"],
            beta1=t["beta1"],
            beta2=t["beta2"],
            adam_eps=t["adam_eps"],
            crop_len=t["crop_len"],
            phase=phase,
            finetune_scope=t["finetune_scope"] or scope_default,
            cond_dropout=t["cond_dropout"],
            prompt_frac=(t["prompt_frac_lo"], t["prompt_frac_hi"]),
        )
    except ValueError as e:
        raise ConfigError(str(e))
