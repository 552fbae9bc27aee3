"""Two-stage training: joint warm-up, then max-loss balancing with a teacher.

Runs are seeded end to end: every random draw keys on (seed, purpose, step,
sample, image), so two runs with the same config produce identical traces on
the double-precision backend.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import losses
from .backbone.base import AdapterState, Backbone
from .batch import DEFAULT_PROMPT_TEMPLATE, TrainingBatch, build_batch
from .degradation import DegradationSchedule
from .dual_stream import (
    TEACHER_EMA,
    TEACHER_MODES,
    MomentumTracker,
    StepLossReport,
    dsbal_step,
    init_momentum,
    update_teacher,
)
from .errors import CheckpointError, ConfigError, TrainingError
from .forward import sample_forward
from .losses import LossWeights, PerSampleLoss
from .pair import PairSpec, prepare_masks, register_pseudo_words

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
STAGE_POST_WARMUP = "post_warmup"
STAGE_POST_DSBAL = "post_dsbal"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters for both stages."""

    warmup_steps: int = 200
    dsbal_steps: int = 300
    warmup_lr: float = 1e-4
    dsbal_lr: float = 1e-5
    # embeddings follow the stage lr unless overridden
    warmup_embedding_lr: float | None = None
    dsbal_embedding_lr: float | None = None
    lr_batch_scaling: bool = True
    weight_decay: float = 1e-2
    seed: int = 0
    beta: float = 0.99
    teacher_mode: str = TEACHER_EMA
    normalization: str = losses.NORM_FULL_GRID
    attn_scope: str = "all"
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE

    def __post_init__(self) -> None:
        if self.warmup_steps < 0 or self.dsbal_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.total_steps < 2:
            raise ConfigError("training needs at least 2 total steps")
        if self.warmup_lr <= 0 or self.dsbal_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.teacher_mode not in TEACHER_MODES:
            raise ConfigError(f"unknown teacher mode {self.teacher_mode!r}")

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.dsbal_steps

    def effective_lr(self, base_lr: float, batch: TrainingBatch) -> float:
        # linear scaling by how many images one optimization step consumes
        return base_lr * batch.total_images if self.lr_batch_scaling else base_lr


def _make_optimizer(
    adapter: AdapterState, lr: float, embedding_lr: float | None, weight_decay: float
) -> torch.optim.AdamW:
    embed_params = [t for k, t in adapter if k.startswith(AdapterState.EMBED_PREFIX)]
    other_params = [t for k, t in adapter if not k.startswith(AdapterState.EMBED_PREFIX)]
    groups = [{"params": other_params, "lr": lr}]
    if embed_params:
        groups.append({"params": embed_params, "lr": embedding_lr if embedding_lr is not None else lr})
    return torch.optim.AdamW(groups, lr=lr, weight_decay=weight_decay)


def _check_finite(total: torch.Tensor, report: StepLossReport) -> None:
    if not torch.isfinite(total).item():
        raise TrainingError(
            f"non-finite loss at step {report.step} ({report.stage}): "
            f"{json.dumps(report.to_json_dict())}"
        )


def run_warmup(
    backbone: Backbone,
    adapter: AdapterState,
    batch: TrainingBatch,
    schedule: DegradationSchedule,
    config: TrainConfig,
    weights: LossWeights,
) -> list[StepLossReport]:
    """Joint stage: every sample contributes diffusion + attention terms.

    Mutates the adapter in place over steps d = 0 .. warmup_steps-1 and
    returns one report per step. warmup_steps=0 leaves the adapter untouched.
    """
    if config.warmup_steps == 0:
        return []
    optimizer = _make_optimizer(
        adapter,
        config.effective_lr(config.warmup_lr, batch),
        None if config.warmup_embedding_lr is None
        else config.effective_lr(config.warmup_embedding_lr, batch),
        config.weight_decay,
    )
    reports = []
    for d in range(config.warmup_steps):
        optimizer.zero_grad(set_to_none=True)
        fwds = [
            sample_forward(backbone, adapter, s, schedule, d, config.seed, config.normalization)
            for s in batch.samples
        ]
        per_sample = [PerSampleLoss(f.diffusion_loss, f.attention_loss) for f in fwds]
        total = losses.warmup_total(per_sample, weights)
        report = StepLossReport(
            step=d,
            stage="warmup",
            alpha=schedule.intensity(d) if schedule.mode != "mask_out" else 0.0,
            per_sample_diffusion=tuple(f.diffusion_loss.item() for f in fwds),
            per_sample_attention=tuple(f.attention_loss.item() for f in fwds),
            attention=torch.stack([p.attention for p in per_sample]).mean().item(),
            total=total.item(),
        )
        _check_finite(total, report)
        total.backward()
        optimizer.step()
        reports.append(report)
    return reports


def run_dsbal(
    backbone: Backbone,
    adapter: AdapterState,
    batch: TrainingBatch,
    schedule: DegradationSchedule,
    config: TrainConfig,
    weights: LossWeights,
) -> tuple[MomentumTracker, list[StepLossReport]]:
    """Balancing stage over steps d = warmup_steps .. total_steps-1.

    A fresh optimizer is created (the stage has its own lr), the teacher is
    initialized from the incoming adapter, and the teacher update runs after
    each optimizer step.
    """
    tracker = init_momentum(adapter, beta=config.beta, mode=config.teacher_mode)
    if config.dsbal_steps == 0:
        return tracker, []
    optimizer = _make_optimizer(
        adapter,
        config.effective_lr(config.dsbal_lr, batch),
        None if config.dsbal_embedding_lr is None
        else config.effective_lr(config.dsbal_embedding_lr, batch),
        config.weight_decay,
    )
    reports = []
    for i in range(config.dsbal_steps):
        d = config.warmup_steps + i
        optimizer.zero_grad(set_to_none=True)
        total, report = dsbal_step(
            backbone,
            adapter,
            batch,
            schedule,
            tracker,
            weights,
            d,
            config.seed,
            config.normalization,
            config.attn_scope,
        )
        _check_finite(total, report)
        total.backward()
        optimizer.step()
        update_teacher(tracker, adapter)
        reports.append(report)
    return tracker, reports


# -- checkpointing -----------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    adapter: AdapterState,
    stage: str,
    config_hash: str,
    seed: int,
    tracker: MomentumTracker | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "stage": stage,
        "config_hash": config_hash,
        "seed": seed,
        "adapter": adapter.state_dict(),
        "momentum": None
        if tracker is None
        else {
            "beta": tracker.beta,
            "mode": tracker.mode,
            "step_count": tracker.step_count,
            "params": tracker.params.state_dict(),
        },
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"checkpoint {path} has no format version")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {payload['format_version']}, "
            f"this build reads {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload


def restore_tracker(payload: dict, template: AdapterState) -> MomentumTracker | None:
    info = payload.get("momentum")
    if info is None:
        return None
    tracker = MomentumTracker(beta=info["beta"], params=template.clone(requires_grad=False), mode=info["mode"])
    tracker.params.load_state_dict(info["params"])
    tracker.step_count = info["step_count"]
    return tracker


# -- whole-pair orchestration ---------------------------------------------------


@dataclass
class TrainResult:
    run_dir: Path
    reports: list[StepLossReport] = field(default_factory=list)
    effective_warmup_lr: float = 0.0
    effective_dsbal_lr: float = 0.0
    batch_size: int = 0
    frozen_fingerprint_before: str = ""
    frozen_fingerprint_after: str = ""
    post_warmup_path: Path | None = None
    final_path: Path | None = None

    @property
    def frozen_base_intact(self) -> bool:
        return self.frozen_fingerprint_before == self.frozen_fingerprint_after


def train_pair(
    pair: PairSpec,
    backbone: Backbone,
    config: TrainConfig,
    weights: LossWeights,
    run_dir: str | Path,
    config_hash: str = "",
    degradation_mode: str = "dynamic",
    alpha_init: float = 0.5,
    gamma: float = 32.0,
    fixed_alpha: float = 0.5,
) -> TrainResult:
    """Full pipeline on one pair: masks, adapter, warm-up, balancing, checkpoints.

    Writes `steps.log` (one JSON record per step) and the two checkpoints
    under `run_dir`; the caller owns the manifest and resolved config.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)

    c, h, w = backbone.latent_shape
    mask_sets = prepare_masks(pair, (h, w), backbone.attn_hw)
    register_pseudo_words(pair, backbone.tokenizer)
    adapter = backbone.build_adapter(seed=config.seed)
    batch = build_batch(pair, mask_sets, backbone, config.prompt_template)
    schedule = DegradationSchedule(
        mode=degradation_mode,
        total_steps=config.total_steps,
        alpha_init=alpha_init,
        gamma=gamma,
        fixed_alpha=fixed_alpha,
    )

    result = TrainResult(
        run_dir=run_dir,
        batch_size=batch.total_images,
        effective_warmup_lr=config.effective_lr(config.warmup_lr, batch),
        effective_dsbal_lr=config.effective_lr(config.dsbal_lr, batch),
        frozen_fingerprint_before=backbone.frozen_fingerprint(),
    )

    started = time.monotonic()
    log_path = run_dir / "steps.log"
    with log_path.open("w") as log:
        warm_reports = run_warmup(backbone, adapter, batch, schedule, config, weights)
        for r in warm_reports:
            log.write(json.dumps(r.to_json_dict()) + "\n")
        result.post_warmup_path = run_dir / "checkpoints" / "post_warmup"
        save_checkpoint(
            result.post_warmup_path, adapter, STAGE_POST_WARMUP, config_hash, config.seed
        )
        tracker, bal_reports = run_dsbal(backbone, adapter, batch, schedule, config, weights)
        for r in bal_reports:
            log.write(json.dumps(r.to_json_dict()) + "\n")
        result.final_path = run_dir / "checkpoints" / "final"
        save_checkpoint(
            result.final_path, adapter, STAGE_POST_DSBAL, config_hash, config.seed, tracker
        )
        result.reports = warm_reports + bal_reports

    result.frozen_fingerprint_after = backbone.frozen_fingerprint()
    if not result.frozen_base_intact:
        raise TrainingError("frozen base parameters changed during training")
    logger.info(
        "trained pair %s: %d steps in %.1fs", pair.pair_id, len(result.reports),
        time.monotonic() - started,
    )
    return result
