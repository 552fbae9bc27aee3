"""Loss kernels: masked diffusion error, attention localization, and routing.

All kernels take explicit tensors and return scalar tensors on the same
device/dtype, so they stay trivially checkable against loop-based oracles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import ConfigError, TrainingError

NORM_FULL_GRID = "full_grid"
NORM_MASK_AREA = "mask_area"


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights of the composite objectives."""

    attention: float = 0.01
    preserving: float = 0.2

    def __post_init__(self) -> None:
        if self.attention < 0 or self.preserving < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class PerSampleLoss:
    """Per-sample pieces of one step, kept as graph tensors."""

    diffusion: torch.Tensor
    attention: torch.Tensor


def _check_mask(mask: torch.Tensor, spatial: tuple[int, int]) -> None:
    if tuple(mask.shape[-2:]) != spatial:
        raise TrainingError(f"mask spatial {tuple(mask.shape)} != prediction spatial {spatial}")


def masked_mse(
    target: torch.Tensor,
    prediction: torch.Tensor,
    mask: torch.Tensor,
    normalization: str = NORM_FULL_GRID,
) -> torch.Tensor:
    """Mean squared error of (target - prediction) restricted to the mask.

    `target`/`prediction` are (K, C, h, w); `mask` is (h, w) or (K, h, w) with
    values in {0, 1}. With `full_grid` normalization the squared masked residual is
    averaged over the whole K*C*h*w grid, so a smaller mask really does mean a
    smaller loss; `mask_area` divides by C * mask area instead.
    """
    if target.shape != prediction.shape:
        raise TrainingError(f"shape mismatch {tuple(target.shape)} vs {tuple(prediction.shape)}")
    if target.ndim != 4:
        raise TrainingError(f"expected (K, C, h, w) tensors, got {tuple(target.shape)}")
    _check_mask(mask, tuple(target.shape[-2:]))
    m = mask.to(target.dtype)
    if m.ndim == 2:
        m = m.unsqueeze(0)
    m = m.unsqueeze(1)  # (K or 1, 1, h, w)
    sq = ((target - prediction) * m).pow(2)
    if normalization == NORM_FULL_GRID:
        return sq.mean()
    if normalization == NORM_MASK_AREA:
        k, c = target.shape[:2]
        area = m.sum() * (k if m.shape[0] == 1 else 1) * c
        if area == 0:
            raise TrainingError("mask_area normalization with an empty mask")
        return sq.sum() / area
    raise ConfigError(f"unknown loss normalization {normalization!r}")


def masked_diffusion_loss(
    noise: torch.Tensor,
    prediction: torch.Tensor,
    latent_mask: torch.Tensor,
    normalization: str = NORM_FULL_GRID,
) -> torch.Tensor:
    """Denoising objective confined to the target region of the latent grid."""
    return masked_mse(noise, prediction, latent_mask, normalization)


def normalize_attention(attn: torch.Tensor) -> torch.Tensor:
    """Min-max normalize each (h, w) map to [0, 1]; constant maps become zeros."""
    if attn.ndim == 2:
        flat = attn.reshape(1, -1)
    elif attn.ndim == 3:
        flat = attn.reshape(attn.shape[0], -1)
    else:
        raise TrainingError(f"expected (h, w) or (K, h, w) attention, got {tuple(attn.shape)}")
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    normed = torch.where(span > 0, (flat - lo) / safe, torch.zeros_like(flat))
    return normed.reshape(attn.shape)


def cross_attention_loss(attn: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
    """MSE between the normalized attention map and the downsampled mask.

    `attn` is (K, h, w): the pseudo-word's map per reference image. The mask
    is (h, w) or (K, h, w) in {0, 1}.
    """
    if attn.ndim != 3:
        raise TrainingError(f"expected (K, h, w) attention maps, got {tuple(attn.shape)}")
    _check_mask(attention_mask, tuple(attn.shape[-2:]))
    normed = normalize_attention(attn)
    m = attention_mask.to(attn.dtype)
    if m.ndim == 2:
        m = m.unsqueeze(0).expand_as(normed)
    return (normed - m).pow(2).mean()


def diff_max(losses: Sequence[torch.Tensor]) -> tuple[torch.Tensor, int]:
    """Largest per-sample loss and its 1-based sample index.

    Ties go to the smallest index so routing is deterministic.
    """
    if not losses:
        raise TrainingError("diff_max needs at least one per-sample loss")
    best = 0
    for i in range(1, len(losses)):
        if losses[i].item() > losses[best].item():
            best = i
    return losses[best], best + 1


def warmup_total(per_sample: Sequence[PerSampleLoss], weights: LossWeights) -> torch.Tensor:
    """Joint objective of the warm-up stage: mean diffusion + weighted mean attention."""
    if not per_sample:
        raise TrainingError("warmup_total needs at least one sample")
    diff = torch.stack([p.diffusion for p in per_sample]).mean()
    attn = torch.stack([p.attention for p in per_sample]).mean()
    return diff + weights.attention * attn


def preserving_loss(
    momentum_preds: Sequence[torch.Tensor],
    online_preds: Sequence[torch.Tensor],
    latent_masks: Sequence[torch.Tensor],
    normalization: str = NORM_FULL_GRID,
) -> torch.Tensor:
    """Masked drift between the momentum and online predictions, averaged over samples.

    Inputs are aligned sequences over the preserved set S; an empty S yields
    an exact zero.
    """
    if not (len(momentum_preds) == len(online_preds) == len(latent_masks)):
        raise TrainingError("preserving_loss inputs must align")
    if not momentum_preds:
        return torch.zeros(())
    vals = [
        masked_mse(m.detach(), o, mask, normalization)
        for m, o, mask in zip(momentum_preds, online_preds, latent_masks)
    ]
    return torch.stack(vals).mean()


def dsbal_total(
    max_diffusion: torch.Tensor,
    preserving: torch.Tensor,
    per_sample: Sequence[PerSampleLoss],
    weights: LossWeights,
) -> torch.Tensor:
    """Balancing-stage objective: routed diffusion + preserving + attention terms."""
    attn = torch.stack([p.attention for p in per_sample]).mean()
    return max_diffusion + weights.preserving * preserving.to(max_diffusion.dtype) + weights.attention * attn
