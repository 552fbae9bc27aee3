"""Tensor views of a pair, ready for the training loop.

Every optimization step consumes the whole pair (all reference images of
both samples), so the batch is built once and reused.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .backbone.base import Backbone
from .errors import TrainingError
from .pair import MaskSet, PairSpec

DEFAULT_PROMPT_TEMPLATE = "a photo of {pseudo_word}"


@dataclass(frozen=True)
class SampleBatch:
    """One sample's images, masks and training prompt as stacked tensors."""

    index: int  # 1-based
    role: str
    pseudo_word: str
    category_label: str
    prompt_text: str
    images: torch.Tensor  # (K, 3, H, W) in [-1, 1]
    pixel_masks: torch.Tensor  # (K, H, W) in {0, 1}
    latent_masks: torch.Tensor  # (K, h, w) in {0, 1}
    attention_masks: torch.Tensor  # (K, ha, wa) in {0, 1}

    @property
    def num_images(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class TrainingBatch:
    pair_id: str
    samples: tuple[SampleBatch, ...]

    @property
    def total_images(self) -> int:
        return sum(s.num_images for s in self.samples)

    def sample(self, index: int) -> SampleBatch:
        for s in self.samples:
            if s.index == index:
                return s
        raise TrainingError(f"no sample with index {index}")


def build_batch(
    pair: PairSpec,
    mask_sets: dict[tuple[int, int], MaskSet],
    backbone: Backbone,
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE,
) -> TrainingBatch:
    """Stack a pair's images and prepared masks into backbone-dtype tensors."""
    if "{pseudo_word}" not in prompt_template:
        raise TrainingError("prompt template must contain '{pseudo_word}'")
    dtype = backbone.dtype
    samples = []
    for spec in pair.samples:
        images = torch.stack(
            [torch.from_numpy(np.ascontiguousarray(img.pixels)) for img in spec.images]
        ).to(dtype)
        keys = [(spec.index, k) for k in range(1, len(spec.images) + 1)]
        missing = [key for key in keys if key not in mask_sets]
        if missing:
            raise TrainingError(f"mask sets missing for {missing}")
        pixel = torch.stack([torch.from_numpy(mask_sets[k].effective_mask) for k in keys]).to(dtype)
        latent = torch.stack([torch.from_numpy(mask_sets[k].latent_mask) for k in keys]).to(dtype)
        attn = torch.stack([torch.from_numpy(mask_sets[k].attention_mask) for k in keys]).to(dtype)
        samples.append(
            SampleBatch(
                index=spec.index,
                role=spec.role,
                pseudo_word=spec.pseudo_word,
                category_label=spec.category_label,
                prompt_text=prompt_template.format(pseudo_word=spec.pseudo_word),
                images=images,
                pixel_masks=pixel,
                latent_masks=latent,
                attention_masks=attn,
            )
        )
    return TrainingBatch(pair_id=pair.pair_id, samples=tuple(samples))
