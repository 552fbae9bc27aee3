"""The per-step forward pass shared by both training stages.

One call degrades a sample's references at the step's intensity, draws that
step's timesteps and target noise, runs the denoiser, and computes the
sample's diffusion and attention losses. All randomness is derived from
(seed, purpose, step, sample, image), never from call order.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from . import losses, rng
from .backbone.base import AdapterState, Backbone, EncodedPrompt
from .batch import SampleBatch
from .degradation import DegradationSchedule, degrade_for_step


@dataclass
class SampleForward:
    """Everything one stage needs from one sample's forward pass."""

    sample_index: int
    timesteps: torch.Tensor  # (K,)
    noise: torch.Tensor  # (K, C, h, w)
    noisy: torch.Tensor  # (K, C, h, w)
    prompt: EncodedPrompt
    prediction: torch.Tensor  # (K, C, h, w), carries grad to the adapter
    attn_map: torch.Tensor  # (K, ha, wa) for the pseudo-word token
    diffusion_loss: torch.Tensor
    attention_loss: torch.Tensor


def degrade_sample(
    sample: SampleBatch, schedule: DegradationSchedule, d: int, seed: int
) -> torch.Tensor:
    """Step-d degraded view of all K reference images of one sample."""
    out = []
    for k in range(sample.num_images):
        image = sample.images[k]
        noise = rng.randn(tuple(image.shape), image.dtype, "degrade", seed, d, sample.index, k + 1)
        out.append(degrade_for_step(schedule, image, sample.pixel_masks[k], d, noise).pixels)
    return torch.stack(out)


def draw_step_noise(
    backbone: Backbone, sample: SampleBatch, d: int, seed: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-image diffusion timesteps and target noise for step d."""
    c, h, w = backbone.latent_shape
    ts, eps = [], []
    for k in range(1, sample.num_images + 1):
        ts.append(rng.randint(0, backbone.num_train_timesteps, "timestep", seed, d, sample.index, k))
        eps.append(rng.randn((c, h, w), backbone.dtype, "noise", seed, d, sample.index, k))
    return torch.tensor(ts, dtype=torch.int64), torch.stack(eps)


def sample_forward(
    backbone: Backbone,
    adapter: AdapterState,
    sample: SampleBatch,
    schedule: DegradationSchedule,
    d: int,
    seed: int,
    normalization: str = losses.NORM_FULL_GRID,
) -> SampleForward:
    """Degrade, encode, noise, predict, and score one sample at step d."""
    degraded = degrade_sample(sample, schedule, d, seed)
    latents = backbone.encode_images(degraded)
    timesteps, noise = draw_step_noise(backbone, sample, d, seed)
    noisy = backbone.add_noise(latents, noise, timesteps)
    prompt = backbone.embed_text(sample.prompt_text, adapter)
    prediction, attn_all = backbone.predict(adapter, noisy, timesteps, prompt)
    attn_map = attn_all[:, prompt.position_of(sample.pseudo_word)]
    return SampleForward(
        sample_index=sample.index,
        timesteps=timesteps,
        noise=noise,
        noisy=noisy,
        prompt=prompt,
        prediction=prediction,
        attn_map=attn_map,
        diffusion_loss=losses.masked_diffusion_loss(noise, prediction, sample.latent_masks, normalization),
        attention_loss=losses.cross_attention_loss(attn_map, sample.attention_masks),
    )


def momentum_prediction(
    backbone: Backbone,
    momentum: AdapterState,
    sample: SampleBatch,
    fwd: SampleForward,
) -> torch.Tensor:
    """Teacher prediction on the SAME noisy latents as the online pass, no grad.

    The teacher embeds the prompt with its own pseudo-word embeddings, so the
    preserved stream is fully decoupled from the online parameters.
    """
    with torch.no_grad():
        prompt = backbone.embed_text(sample.prompt_text, momentum)
        prediction, _ = backbone.predict(momentum, fwd.noisy.detach(), fwd.timesteps, prompt)
    return prediction
