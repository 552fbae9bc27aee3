"""Masked reference degradation with a step-scheduled noise intensity.

Out-of-mask pixels get Gaussian noise added; in-mask pixels pass through
untouched. The intensity decays over training so early steps see heavily
perturbed backgrounds and the final step sees the clean image again.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError

MODE_DYNAMIC = "dynamic"
MODE_FIXED = "fixed"
MODE_LINEAR_ASCENT = "linear_ascent"
MODE_LINEAR_DESCENT = "linear_descent"
MODE_OFF = "off"
MODE_MASK_OUT = "mask_out"

SCHEDULE_MODES = (
    MODE_DYNAMIC,
    MODE_FIXED,
    MODE_LINEAR_ASCENT,
    MODE_LINEAR_DESCENT,
    MODE_OFF,
    MODE_MASK_OUT,
)


@dataclass(frozen=True)
class DegradationSchedule:
    """Maps a 0-based global step d in [0, total_steps) to a noise intensity.

    `total_steps` counts every training step (warm-up plus balancing); the
    normalizer D = total_steps - 1 so the dynamic and descending schedules
    hit exactly zero on the last step.
    """

    mode: str = MODE_DYNAMIC
    total_steps: int = 500
    alpha_init: float = 0.5
    gamma: float = 32.0
    fixed_alpha: float = 0.5

    def __post_init__(self) -> None:
        if self.mode not in SCHEDULE_MODES:
            raise ConfigError(f"unknown degradation mode {self.mode!r}")
        if self.total_steps < 2:
            raise ConfigError("degradation schedule needs at least 2 steps")
        if self.alpha_init < 0 or self.fixed_alpha < 0:
            raise ConfigError("degradation intensity must be non-negative")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")

    @property
    def horizon(self) -> int:
        return self.total_steps - 1

    def intensity(self, d: int) -> float:
        """Noise scale alpha_d for step d. Pure float64 scalar math."""
        if d < 0 or d >= self.total_steps:
            raise ConfigError(f"step {d} outside [0, {self.total_steps})")
        if self.mode in (MODE_OFF, MODE_MASK_OUT):
            return 0.0
        if self.mode == MODE_FIXED:
            return self.fixed_alpha
        frac = d / self.horizon
        if self.mode == MODE_LINEAR_ASCENT:
            return self.alpha_init * frac
        if self.mode == MODE_LINEAR_DESCENT:
            return self.alpha_init * (1.0 - frac)
        return self.alpha_init * (1.0 - frac**self.gamma)


@dataclass(frozen=True)
class DegradedImage:
    """Result of degrading one reference image at one step."""

    pixels: torch.Tensor  # (3, H, W), same dtype as the input
    alpha: float
    mode: str


def degrade(image: torch.Tensor, mask: torch.Tensor, alpha: float, noise: torch.Tensor) -> torch.Tensor:
    """Add alpha-scaled noise outside the mask, leaving masked pixels bit-identical.

    `mask` is (H, W) with 1 marking the region to protect; `noise` must match
    the image shape. No clamping: values may leave [-1, 1].
    """
    if noise.shape != image.shape:
        raise ConfigError(f"noise shape {tuple(noise.shape)} != image shape {tuple(image.shape)}")
    if mask.shape != image.shape[-2:]:
        raise ConfigError(f"mask shape {tuple(mask.shape)} != image spatial {tuple(image.shape[-2:])}")
    keep = mask.to(torch.bool)
    # torch.where instead of add-with-zeroed-noise: adding 0.0 can still flip
    # the sign bit of -0.0 pixels, and in-mask bytes must survive unchanged.
    perturbed = image + alpha * noise.to(image.dtype)
    return torch.where(keep, image, perturbed)


def mask_out(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Hard variant: zero everything outside the mask instead of noising it."""
    if mask.shape != image.shape[-2:]:
        raise ConfigError(f"mask shape {tuple(mask.shape)} != image spatial {tuple(image.shape[-2:])}")
    return image * mask.to(image.dtype)


def degrade_for_step(
    schedule: DegradationSchedule,
    image: torch.Tensor,
    mask: torch.Tensor,
    d: int,
    noise: torch.Tensor,
) -> DegradedImage:
    """Apply the schedule's step-d transform to one image."""
    if schedule.mode == MODE_MASK_OUT:
        return DegradedImage(pixels=mask_out(image, mask), alpha=0.0, mode=schedule.mode)
    alpha = schedule.intensity(d)
    if schedule.mode == MODE_OFF or alpha == 0.0:
        return DegradedImage(pixels=image.clone(), alpha=alpha, mode=schedule.mode)
    return DegradedImage(pixels=degrade(image, mask, alpha, noise), alpha=alpha, mode=schedule.mode)
