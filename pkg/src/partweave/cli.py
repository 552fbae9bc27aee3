"""Command-line entry point: train, evaluate, ablate, inspect-masks.

Every config key doubles as a CLI flag (--train.seed 1, --dsbal.beta 0.5);
precedence is flag > config file > default. Each run writes its resolved
config, a manifest with the config hash, and stage outputs under one
directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__, config as cfg
from .backbone import create_backbone
from .errors import (
    CheckpointError,
    ConfigError,
    EvaluationError,
    IngestionError,
    PartweaveError,
)
from .evaluation import (
    FullFrameSegmenter,
    GenSettings,
    PromptSuite,
    aggregate_metrics,
    default_stub_scorers,
    generate_eval_images,
)
from .losses import LossWeights
from .pair import PairSpec, load_pair, prepare_masks, register_pseudo_words
from .trainer import TrainConfig, load_checkpoint, train_pair

USAGE_ERROR = 2
RUNTIME_ERROR = 1


# -- config plumbing -----------------------------------------------------------


def add_schema_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for entry in cfg.SCHEMA:
        extra = f" [default: {entry.default}]"
        if entry.choices:
            extra = f" [one of: {', '.join(map(str, entry.choices))}]" + extra
        group.add_argument(
            f"--{entry.key}",
            dest=entry.key.replace(".", "__"),
            default=argparse.SUPPRESS,
            metavar="V",
            help=entry.help + extra,
        )


def collect_overrides(args: argparse.Namespace) -> dict[str, object]:
    overrides = {}
    for entry in cfg.SCHEMA:
        dest = entry.key.replace(".", "__")
        if hasattr(args, dest):
            overrides[entry.key] = getattr(args, dest)
    return overrides


def resolve_from_args(args: argparse.Namespace) -> dict[str, object]:
    file_config: dict = {}
    if getattr(args, "config", None):
        file_config, _ = cfg.load_config_file(args.config)
    return cfg.resolve(file_config, collect_overrides(args))


def require_pair(resolved: dict[str, object]) -> PairSpec:
    path = resolved["pair.config"]
    if not path:
        raise ConfigError("pair.config: no pair file given (use --config or --pair.config)")
    return load_pair(path)


def build_backbone(resolved: dict[str, object], pair: PairSpec | None = None):
    kind = resolved["backbone.kind"]
    resolution = resolved["backbone.resolution"]
    if kind == "toy":
        if resolution is None:
            resolution = pair.resolution if pair is not None else 64
        return create_backbone(
            "toy",
            resolution=resolution,
            model_dim=resolved["backbone.model_dim"],
            lora_rank=resolved["backbone.lora_rank"] or 4,
            lora_alpha=resolved["backbone.lora_alpha"],
            seed=resolved["backbone.seed"],
        )
    return create_backbone(
        "real",
        model_path=resolved["backbone.model_path"] or "runwayml/stable-diffusion-v1-5",
        resolution=resolution or 512,
        lora_rank=resolved["backbone.lora_rank"] or 32,
        lora_alpha=resolved["backbone.lora_alpha"],
        seed=resolved["backbone.seed"],
    )


def train_config_from(resolved: dict[str, object]) -> TrainConfig:
    return TrainConfig(
        warmup_steps=resolved["train.warmup_steps"],
        dsbal_steps=resolved["train.dsbal_steps"],
        warmup_lr=resolved["train.warmup_lr"],
        dsbal_lr=resolved["train.dsbal_lr"],
        warmup_embedding_lr=resolved["train.warmup_embedding_lr"],
        dsbal_embedding_lr=resolved["train.dsbal_embedding_lr"],
        lr_batch_scaling=resolved["train.lr_batch_scaling"],
        weight_decay=resolved["train.weight_decay"],
        seed=resolved["train.seed"],
        beta=resolved["dsbal.beta"],
        teacher_mode=resolved["dsbal.teacher"],
        normalization=resolved["loss.mask_reduction"],
        attn_scope=resolved["loss.attn_scope"],
        prompt_template=resolved["train.prompt_template"],
    )


def write_manifest(
    run_dir: Path, resolved: dict[str, object], pair_id: str, command: str, stages: dict
) -> Path:
    manifest = {
        "pair_id": pair_id,
        "command": command,
        "config": cfg.nest(resolved),
        "config_hash": cfg.config_hash(resolved),
        "seed": resolved["train.seed"],
        "versions": {
            "partweave": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "stages": stages,
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


# -- subcommands -------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    resolved = resolve_from_args(args)
    pair = require_pair(resolved)
    backbone = build_backbone(resolved, pair)
    if pair.resolution != backbone.resolution:
        raise ConfigError(
            f"pair resolution {pair.resolution} != backbone resolution {backbone.resolution}"
        )
    run_dir = Path(resolved["run.dir"] or Path("runs") / pair.pair_id)
    run_dir.mkdir(parents=True, exist_ok=True)

    cfg.write_resolved(resolved, run_dir / "config.resolved")
    stages = {"warmup": "pending", "dsbal": "pending"}
    manifest_path = write_manifest(run_dir, resolved, pair.pair_id, "train", stages)

    tcfg = train_config_from(resolved)
    weights = LossWeights(
        attention=resolved["loss.lambda_attn"], preserving=resolved["loss.lambda_pres"]
    )
    result = train_pair(
        pair,
        backbone,
        tcfg,
        weights,
        run_dir,
        config_hash=cfg.config_hash(resolved),
        degradation_mode=resolved["degradation.mode"],
        alpha_init=resolved["degradation.alpha_init"],
        gamma=resolved["degradation.gamma"],
        fixed_alpha=resolved["degradation.fixed_alpha"],
    )

    stages["warmup"] = "completed" if tcfg.warmup_steps else "skipped"
    stages["dsbal"] = "completed" if tcfg.dsbal_steps else "skipped"
    manifest = json.loads(manifest_path.read_text())
    manifest["stages"] = stages
    manifest["batch_size"] = result.batch_size
    manifest["effective_warmup_lr"] = result.effective_warmup_lr
    manifest["effective_dsbal_lr"] = result.effective_dsbal_lr
    manifest["frozen_base_intact"] = result.frozen_base_intact
    manifest["steps_completed"] = len(result.reports)
    manifest_path.write_text(json.dumps(manifest, indent=2))

    print(f"run complete: {run_dir}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    resolved = resolve_from_args(args)
    pair = require_pair(resolved)
    ckpt_path = Path(args.checkpoint)
    payload = load_checkpoint(ckpt_path)

    backbone = build_backbone(resolved, pair)
    register_pseudo_words(pair, backbone.tokenizer)
    adapter = backbone.build_adapter(seed=resolved["train.seed"])
    adapter.load_state_dict(payload["adapter"])

    suite = (
        PromptSuite.from_file(resolved["eval.prompts"])
        if resolved["eval.prompts"]
        else PromptSuite.bundled()
    )
    settings = GenSettings(
        steps=resolved["eval.steps"],
        guidance_scale=resolved["eval.guidance_scale"],
        images_per_prompt=resolved["eval.images_per_prompt"],
    )
    run_dir = Path(resolved["run.dir"] or ckpt_path.parent.parent / "eval")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(resolved, run_dir / "config.resolved")
    write_manifest(run_dir, resolved, pair.pair_id, "evaluate", {"generate": "pending"})

    manifest = generate_eval_images(backbone, adapter, pair, suite, settings, run_dir)
    report = aggregate_metrics(manifest, default_stub_scorers(), FullFrameSegmenter(), pair, run_dir)
    metrics_path = run_dir / "metrics.json"
    metrics_path.write_text(json.dumps(report.to_json_dict(), indent=2))
    write_manifest(run_dir, resolved, pair.pair_id, "evaluate", {"generate": "completed"})

    print(str(metrics_path))
    return 0


ABLATION_GRIDS: dict[str, dict[str, dict[str, object]]] = {
    "degradation": {
        "mask_out": {"degradation.mode": "mask_out"},
        "fixed_0.4": {"degradation.mode": "fixed", "degradation.fixed_alpha": 0.4},
        "fixed_0.6": {"degradation.mode": "fixed", "degradation.fixed_alpha": 0.6},
        "fixed_0.8": {"degradation.mode": "fixed", "degradation.fixed_alpha": 0.8},
        "linear_ascent": {"degradation.mode": "linear_ascent"},
        "linear_descent": {"degradation.mode": "linear_descent"},
        "dynamic_gamma8": {"degradation.mode": "dynamic", "degradation.gamma": 8.0},
        "dynamic_gamma16": {"degradation.mode": "dynamic", "degradation.gamma": 16.0},
        "dynamic_gamma32": {"degradation.mode": "dynamic", "degradation.gamma": 32.0},
        "dynamic_gamma64": {"degradation.mode": "dynamic", "degradation.gamma": 64.0},
    },
    "teacher": {
        "ema_0.5": {"dsbal.teacher": "ema", "dsbal.beta": 0.5},
        "ema_0.9": {"dsbal.teacher": "ema", "dsbal.beta": 0.9},
        "ema_0.99": {"dsbal.teacher": "ema", "dsbal.beta": 0.99},
        "frozen_warmup": {"dsbal.teacher": "frozen_warmup"},
        "previous_step": {"dsbal.teacher": "previous_step"},
    },
    "warmup": {
        "warmup_on": {},
        "warmup_off": {"train.warmup_steps": 0},
    },
}


def _run_variant(
    name: str, resolved: dict[str, object], variants_dir: Path
) -> dict[str, object]:
    pair = require_pair(resolved)
    backbone = build_backbone(resolved, pair)
    run_dir = variants_dir / name
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(resolved, run_dir / "config.resolved")
    write_manifest(run_dir, resolved, pair.pair_id, "train", {"warmup": "pending", "dsbal": "pending"})

    tcfg = train_config_from(resolved)
    weights = LossWeights(
        attention=resolved["loss.lambda_attn"], preserving=resolved["loss.lambda_pres"]
    )
    result = train_pair(
        pair,
        backbone,
        tcfg,
        weights,
        run_dir,
        config_hash=cfg.config_hash(resolved),
        degradation_mode=resolved["degradation.mode"],
        alpha_init=resolved["degradation.alpha_init"],
        gamma=resolved["degradation.gamma"],
        fixed_alpha=resolved["degradation.fixed_alpha"],
    )
    write_manifest(
        run_dir, resolved, pair.pair_id, "train", {"warmup": "completed", "dsbal": "completed"}
    )
    final = result.reports[-1]
    dsbal_reports = [r for r in result.reports if r.stage == "dsbal"]
    switches = sum(
        1
        for prev, cur in zip(dsbal_reports, dsbal_reports[1:])
        if prev.n_max != cur.n_max
    )
    return {
        "variant": name,
        "run_dir": str(run_dir),
        "config_hash": cfg.config_hash(resolved),
        "final_total": final.total,
        "final_diffusion_concept": final.per_sample_diffusion[0],
        "final_diffusion_component": final.per_sample_diffusion[1],
        "final_attention": final.attention,
        "final_preserving": final.preserving,
        "n_max_switches": switches,
    }


def cmd_ablate(args: argparse.Namespace) -> int:
    base_file: dict = {}
    if args.config:
        base_file, _ = cfg.load_config_file(args.config)
    base_overrides = collect_overrides(args)

    if args.grid_file:
        grid_path = Path(args.grid_file)
        if not grid_path.is_file():
            raise ConfigError(f"grid file not found: {grid_path}")
        grid = yaml.safe_load(grid_path.read_text())
        if not isinstance(grid, dict):
            raise ConfigError("grid file must map variant names to config overrides")
    elif args.grid:
        if args.grid == "all":
            grid = {
                f"{group}.{name}": spec
                for group, variants in ABLATION_GRIDS.items()
                for name, spec in variants.items()
            }
        else:
            grid = ABLATION_GRIDS.get(args.grid)
            if grid is None:
                raise ConfigError(
                    f"unknown grid {args.grid!r}; presets: {', '.join(ABLATION_GRIDS)}, all"
                )
    else:
        raise ConfigError("ablate needs --grid or --grid-file")
    if not grid:
        raise ConfigError("ablation grid is empty")

    out_dir = Path(args.out or "ablation")
    variants_dir = out_dir / "variants"
    variants_dir.mkdir(parents=True, exist_ok=True)

    resolved_variants = {}
    for name, spec in grid.items():
        if not isinstance(spec, dict):
            raise ConfigError(f"variant {name!r} must map config keys to values")
        overrides = dict(base_overrides)
        overrides.update(spec)  # variant wins over base flags
        resolved_variants[name] = cfg.resolve(base_file, overrides)

    rows = []
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            futures = {
                name: pool.submit(_run_variant, name, resolved, variants_dir)
                for name, resolved in resolved_variants.items()
            }
            rows = [futures[name].result() for name in resolved_variants]
    else:
        for name, resolved in resolved_variants.items():
            rows.append(_run_variant(name, resolved, variants_dir))

    json_path = out_dir / "comparison.json"
    json_path.write_text(json.dumps(rows, indent=2))
    csv_path = out_dir / "comparison.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    print(str(csv_path))
    return 0


def cmd_inspect_masks(args: argparse.Namespace) -> int:
    from PIL import Image

    resolved = resolve_from_args(args)
    pair = require_pair(resolved)
    backbone = build_backbone(resolved, pair)
    c, h, w = backbone.latent_shape
    mask_sets = prepare_masks(pair, (h, w), backbone.attn_hw)
    out_dir = Path(args.out or "mask_debug")
    out_dir.mkdir(parents=True, exist_ok=True)
    for (n, k), masks in sorted(mask_sets.items()):
        for label, arr in (
            ("effective", masks.effective_mask),
            ("latent", masks.latent_mask),
            ("attention", masks.attention_mask),
        ):
            Image.fromarray(arr * 255).save(out_dir / f"sample{n}_image{k}_{label}.png")
        print(
            f"sample {n} image {k}: effective {masks.effective_mask.sum()} px, "
            f"latent {masks.latent_mask.sum()} cells, attention {masks.attention_mask.sum()} cells"
        )
    print(f"masks written to {out_dir}")
    return 0


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partweave",
        description="Train and evaluate concept+component personalization of diffusion models.",
    )
    parser.add_argument("--version", action="version", version=f"partweave {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run warm-up + balancing on one pair")
    p_train.add_argument("--config", help="run or pair config YAML")
    add_schema_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="generate the prompt suite and score it")
    p_eval.add_argument("--config", help="run or pair config YAML")
    p_eval.add_argument("--checkpoint", required=True, help="trained checkpoint to evaluate")
    add_schema_flags(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_ablate = sub.add_parser("ablate", help="run a variant grid and tabulate results")
    p_ablate.add_argument("--config", help="base run or pair config YAML")
    p_ablate.add_argument("--grid", help="preset grid: degradation, teacher, warmup, all")
    p_ablate.add_argument("--grid-file", help="YAML mapping variant names to config overrides")
    p_ablate.add_argument("--out", help="output directory [default: ablation]")
    p_ablate.add_argument("--jobs", type=int, default=1, help="parallel variant runs")
    add_schema_flags(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_masks = sub.add_parser("inspect-masks", help="dump effective/latent/attention masks as PNGs")
    p_masks.add_argument("--config", help="run or pair config YAML")
    p_masks.add_argument("--out", help="output directory [default: mask_debug]")
    add_schema_flags(p_masks)
    p_masks.set_defaults(func=cmd_inspect_masks)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IngestionError, CheckpointError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except PartweaveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
