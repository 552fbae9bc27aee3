"""Balancing stage: momentum teacher, max-loss routing, and the combined objective.

Each step the online model optimizes only the worst-learned sample's
diffusion loss; the remaining samples are held near the momentum teacher's
predictions. The teacher trails the online parameters by EMA.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import losses
from .backbone.base import AdapterState, Backbone
from .batch import TrainingBatch
from .degradation import DegradationSchedule
from .errors import ConfigError, TrainingError
from .forward import momentum_prediction, sample_forward
from .losses import LossWeights

TEACHER_EMA = "ema"
TEACHER_FROZEN_WARMUP = "frozen_warmup"
TEACHER_PREVIOUS_STEP = "previous_step"
TEACHER_MODES = (TEACHER_EMA, TEACHER_FROZEN_WARMUP, TEACHER_PREVIOUS_STEP)

ATTN_SCOPE_ALL = "all"
ATTN_SCOPE_MAX_ONLY = "max_only"


@dataclass
class MomentumTracker:
    """EMA-tracked copy of the adapter, used as the no-gradient teacher."""

    beta: float
    params: AdapterState
    step_count: int = 0
    mode: str = TEACHER_EMA

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.mode not in TEACHER_MODES:
            raise ConfigError(f"unknown teacher mode {self.mode!r}")


@dataclass(frozen=True)
class RoutingDecision:
    """Which sample the online stream optimizes, and which ones the teacher guards."""

    n_max: int
    preserved: tuple[int, ...]
    per_sample_diffusion: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.n_max in self.preserved:
            raise TrainingError("n_max must not be in the preserved set")


@dataclass(frozen=True)
class StepLossReport:
    """One machine-readable record per optimization step."""

    step: int
    stage: str  # "warmup" | "dsbal"
    alpha: float
    per_sample_diffusion: tuple[float, ...]
    per_sample_attention: tuple[float, ...]
    attention: float
    total: float
    n_max: int | None = None
    preserved: tuple[int, ...] = field(default_factory=tuple)
    preserving: float | None = None

    def to_json_dict(self) -> dict:
        out = {
            "step": self.step,
            "stage": self.stage,
            "alpha": self.alpha,
            "per_sample_diffusion": list(self.per_sample_diffusion),
            "per_sample_attention": list(self.per_sample_attention),
            "attention": self.attention,
            "total": self.total,
        }
        if self.stage == "dsbal":
            out["n_max"] = self.n_max
            out["preserved"] = list(self.preserved)
            out["preserving"] = self.preserving
        return out


def init_momentum(online: AdapterState, beta: float = 0.99, mode: str = TEACHER_EMA) -> MomentumTracker:
    """Teacher starts as an exact copy of the online adapter."""
    return MomentumTracker(beta=beta, params=online.clone(requires_grad=False), mode=mode)


def ema_update(tracker: MomentumTracker, online: AdapterState) -> MomentumTracker:
    """Elementwise theta_tilde <- beta * theta_tilde + (1 - beta) * theta."""
    if tracker.params.keys != online.keys:
        raise TrainingError("momentum/online adapter layouts differ")
    with torch.no_grad():
        for key, target in tracker.params:
            target.mul_(tracker.beta).add_((1.0 - tracker.beta) * online[key].detach())
    tracker.step_count += 1
    return tracker


def update_teacher(tracker: MomentumTracker, online: AdapterState) -> MomentumTracker:
    """Post-optimizer teacher refresh for the configured mode.

    `frozen_warmup` keeps the warm-up snapshot forever (the beta=1 limit);
    `previous_step` copies the online state each step (the beta=0 limit).
    """
    if tracker.mode == TEACHER_FROZEN_WARMUP:
        tracker.step_count += 1
        return tracker
    if tracker.mode == TEACHER_PREVIOUS_STEP:
        with torch.no_grad():
            for key, target in tracker.params:
                target.copy_(online[key].detach())
        tracker.step_count += 1
        return tracker
    return ema_update(tracker, online)


def dsbal_step(
    backbone: Backbone,
    adapter: AdapterState,
    batch: TrainingBatch,
    schedule: DegradationSchedule,
    tracker: MomentumTracker,
    weights: LossWeights,
    d: int,
    seed: int,
    normalization: str = losses.NORM_FULL_GRID,
    attn_scope: str = ATTN_SCOPE_ALL,
) -> tuple[torch.Tensor, StepLossReport]:
    """One balancing step: route, preserve, and assemble the total objective.

    Returns the total as a graph tensor (gradients reach only the online
    adapter) plus the immutable report. The teacher update belongs to the
    caller, after the optimizer consumes the total.
    """
    fwds = [
        sample_forward(backbone, adapter, s, schedule, d, seed, normalization)
        for s in batch.samples
    ]
    diff_losses = [f.diffusion_loss for f in fwds]
    max_loss, n_max = losses.diff_max(diff_losses)
    preserved = tuple(f.sample_index for f in fwds if f.sample_index != n_max)

    by_index = {s.index: s for s in batch.samples}
    momentum_preds, online_preds, masks = [], [], []
    for f in fwds:
        if f.sample_index == n_max:
            continue
        sample = by_index[f.sample_index]
        momentum_preds.append(momentum_prediction(backbone, tracker.params, sample, f))
        online_preds.append(f.prediction)
        masks.append(sample.latent_masks)
    preserving = losses.preserving_loss(momentum_preds, online_preds, masks, normalization)

    if attn_scope == ATTN_SCOPE_ALL:
        attn_members = fwds
    elif attn_scope == ATTN_SCOPE_MAX_ONLY:
        attn_members = [f for f in fwds if f.sample_index == n_max]
    else:
        raise ConfigError(f"unknown attention scope {attn_scope!r}")
    per_sample = [losses.PerSampleLoss(f.diffusion_loss, f.attention_loss) for f in attn_members]
    total = losses.dsbal_total(max_loss, preserving, per_sample, weights)

    attn_mean = torch.stack([p.attention for p in per_sample]).mean()
    report = StepLossReport(
        step=d,
        stage="dsbal",
        alpha=schedule.intensity(d) if schedule.mode != "mask_out" else 0.0,
        per_sample_diffusion=tuple(f.diffusion_loss.item() for f in fwds),
        per_sample_attention=tuple(f.attention_loss.item() for f in fwds),
        attention=attn_mean.item(),
        total=total.item(),
        n_max=n_max,
        preserved=preserved,
        preserving=preserving.item(),
    )
    return total, report
