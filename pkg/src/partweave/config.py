"""Declarative run configuration: one flat schema of dotted keys.

Precedence is CLI override > config file > built-in default, resolved once
into a single materialized dict whose hash identifies the run.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigError

_ENV_MODEL_PATH = "PARTWEAVE_MODEL_PATH"


@dataclass(frozen=True)
class ConfigKey:
    key: str
    kind: str  # int | float | str | bool | opt_int | opt_float | opt_str
    default: object
    help: str
    choices: tuple | None = None


SCHEMA: tuple[ConfigKey, ...] = (
    ConfigKey("pair.config", "opt_str", None, "path to the pair YAML (images, masks, pseudo-words)"),
    ConfigKey("backbone.kind", "str", "toy", "which diffusion backbone to use", ("toy", "real")),
    ConfigKey("backbone.model_path", "opt_str", None,
              "weights location for the real backbone (env PARTWEAVE_MODEL_PATH overrides the default)"),
    ConfigKey("backbone.resolution", "opt_int", None, "image resolution; default 64 toy / 512 real"),
    ConfigKey("backbone.model_dim", "int", 16, "toy backbone width"),
    ConfigKey("backbone.lora_rank", "opt_int", None, "adapter rank; default 4 toy / 32 real"),
    ConfigKey("backbone.lora_alpha", "float", 32.0, "adapter scale numerator"),
    ConfigKey("backbone.seed", "int", 0, "seed for frozen backbone weights"),
    ConfigKey("train.warmup_steps", "int", 200, "joint warm-up steps"),
    ConfigKey("train.dsbal_steps", "int", 300, "balancing-stage steps"),
    ConfigKey("train.warmup_lr", "float", 1e-4, "warm-up learning rate (before batch scaling)"),
    ConfigKey("train.dsbal_lr", "float", 1e-5, "balancing learning rate (before batch scaling)"),
    ConfigKey("train.warmup_embedding_lr", "opt_float", None,
              "pseudo-word embedding lr in warm-up; null = warmup_lr"),
    ConfigKey("train.dsbal_embedding_lr", "opt_float", None,
              "pseudo-word embedding lr in balancing; null = dsbal_lr"),
    ConfigKey("train.lr_batch_scaling", "bool", True, "multiply lr by images per step"),
    ConfigKey("train.weight_decay", "float", 1e-2, "optimizer weight decay"),
    ConfigKey("train.seed", "int", 0, "global run seed"),
    ConfigKey("train.prompt_template", "str", "a photo of {pseudo_word}", "training prompt shape"),
    ConfigKey("degradation.mode", "str", "dynamic", "reference degradation schedule",
              ("dynamic", "fixed", "linear_ascent", "linear_descent", "off", "mask_out")),
    ConfigKey("degradation.alpha_init", "float", 0.5, "initial noise intensity"),
    ConfigKey("degradation.gamma", "float", 32.0, "decay exponent of the dynamic schedule"),
    ConfigKey("degradation.fixed_alpha", "float", 0.5, "intensity for mode=fixed"),
    ConfigKey("dsbal.beta", "float", 0.99, "teacher EMA smoothing coefficient"),
    ConfigKey("dsbal.teacher", "str", "ema", "teacher update rule",
              ("ema", "frozen_warmup", "previous_step")),
    ConfigKey("loss.lambda_attn", "float", 0.01, "attention loss weight"),
    ConfigKey("loss.lambda_pres", "float", 0.2, "preserving loss weight"),
    ConfigKey("loss.mask_reduction", "str", "full_grid", "masked-loss normalization",
              ("full_grid", "mask_area")),
    ConfigKey("loss.attn_scope", "str", "all", "which samples contribute attention loss in balancing",
              ("all", "max_only")),
    ConfigKey("eval.steps", "int", 50, "sampler steps per evaluation image"),
    ConfigKey("eval.guidance_scale", "float", 7.5, "classifier-free guidance scale"),
    ConfigKey("eval.images_per_prompt", "int", 32, "images per prompt, seeds 0..n-1"),
    ConfigKey("eval.prompts", "opt_str", None, "custom prompt file; null = bundled suite"),
    ConfigKey("run.dir", "opt_str", None, "output directory; null = runs/<pair_id>"),
)

_BY_KEY = {entry.key: entry for entry in SCHEMA}


def defaults() -> dict[str, object]:
    return {entry.key: entry.default for entry in SCHEMA}


def flatten(nested: dict, prefix: str = "") -> dict[str, object]:
    """Nested dicts -> dotted keys. Already-dotted keys pass through."""
    flat: dict[str, object] = {}
    for key, value in nested.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, f"{full}."))
        else:
            flat[full] = value
    return flat


def nest(flat: dict[str, object]) -> dict:
    out: dict = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def coerce(key: str, value: object) -> object:
    entry = _BY_KEY.get(key)
    if entry is None:
        raise ConfigError(f"unknown config key: {key}")
    kind = entry.kind
    if value is None or (isinstance(value, str) and value.lower() in ("null", "none")):
        if kind.startswith("opt_"):
            return None
        raise ConfigError(f"{key}: null not allowed")
    try:
        if kind in ("int", "opt_int"):
            coerced: object = int(value)
        elif kind in ("float", "opt_float"):
            coerced = float(value)
        elif kind == "bool":
            if isinstance(value, bool):
                coerced = value
            elif str(value).lower() in ("true", "1", "yes", "on"):
                coerced = True
            elif str(value).lower() in ("false", "0", "no", "off"):
                coerced = False
            else:
                raise ValueError(value)
        else:
            coerced = str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    if entry.choices and coerced not in entry.choices:
        raise ConfigError(f"{key}: {coerced!r} not in {entry.choices}")
    return coerced


def resolve(
    file_config: dict | None = None, overrides: dict[str, object] | None = None
) -> dict[str, object]:
    """Materialize the full config: defaults, then file values, then overrides."""
    resolved = defaults()
    for source in (flatten(file_config or {}), overrides or {}):
        for key, value in source.items():
            resolved[key] = coerce(key, value)
    if resolved["backbone.model_path"] is None and os.environ.get(_ENV_MODEL_PATH):
        resolved["backbone.model_path"] = os.environ[_ENV_MODEL_PATH]
    return resolved


def load_config_file(path: str | Path) -> tuple[dict, dict | None]:
    """Read a config YAML; returns (config mapping, inline pair mapping or None).

    A file that itself declares `samples:` is a pair spec: it contributes
    only `pair.config` pointing back at itself.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must be a mapping")
    if "samples" in raw:
        return {"pair": {"config": str(path)}}, raw
    return raw, None


def config_hash(resolved: dict[str, object]) -> str:
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_resolved(resolved: dict[str, object], path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(nest(resolved), sort_keys=True))
