"""Shared backbone surface: what the trainer needs from any diffusion model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Protocol, runtime_checkable

import torch

from ..errors import TrainingError
from ..pair import TokenizerInterface


@dataclass(frozen=True)
class EncodedPrompt:
    """A tokenized prompt plus its embedding matrix."""

    text: str
    token_ids: tuple[int, ...]
    embeddings: torch.Tensor  # (L, E)
    positions: dict[str, int] = field(default_factory=dict)  # token -> first index

    def position_of(self, token: str) -> int:
        if token not in self.positions:
            raise TrainingError(f"token {token!r} does not occur in prompt {self.text!r}")
        return self.positions[token]


@dataclass(frozen=True)
class NoisyLatent:
    """Latents after forward noising, with the noise and timesteps that made them."""

    latents: torch.Tensor  # (K, C, h, w)
    noise: torch.Tensor  # (K, C, h, w)
    timesteps: torch.Tensor  # (K,) int64 in [0, T)


class AdapterState:
    """The full set of tunable tensors: LoRA factors and pseudo-word embeddings.

    Keys are stable and ordered, so the flat-vector view is well defined:
    `flatten`/`load_flat` round-trip exactly. Embedding tensors use keys of
    the form `embed.<token>`.
    """

    EMBED_PREFIX = "embed."

    def __init__(self, tensors: dict[str, torch.Tensor]):
        self.tensors = dict(tensors)

    def __iter__(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self.tensors.items())

    def __getitem__(self, key: str) -> torch.Tensor:
        return self.tensors[key]

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(self.tensors.keys())

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def parameters(self) -> list[torch.Tensor]:
        return list(self.tensors.values())

    def embedding(self, token: str) -> torch.Tensor | None:
        return self.tensors.get(self.EMBED_PREFIX + token)

    def requires_grad_(self, flag: bool = True) -> "AdapterState":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def clone(self, requires_grad: bool = False) -> "AdapterState":
        out = {k: t.detach().clone().requires_grad_(requires_grad) for k, t in self.tensors.items()}
        return AdapterState(out)

    def flatten(self) -> torch.Tensor:
        return torch.cat([t.detach().reshape(-1) for t in self.tensors.values()])

    def load_flat(self, vec: torch.Tensor) -> None:
        if vec.numel() != self.numel():
            raise TrainingError(f"flat vector has {vec.numel()} values, adapter has {self.numel()}")
        offset = 0
        with torch.no_grad():
            for t in self.tensors.values():
                n = t.numel()
                t.copy_(vec[offset : offset + n].reshape(t.shape).to(t.dtype))
                offset += n

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: t.detach().clone() for k, t in self.tensors.items()}

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        if set(state) != set(self.tensors):
            missing = set(self.tensors) - set(state)
            extra = set(state) - set(self.tensors)
            raise TrainingError(f"adapter state mismatch: missing {missing}, unexpected {extra}")
        with torch.no_grad():
            for k, t in self.tensors.items():
                t.copy_(state[k].to(t.dtype))


@runtime_checkable
class Backbone(Protocol):
    """What both backends implement. All tensor ops stay on `device`/`dtype`."""

    name: str
    resolution: int
    num_train_timesteps: int

    @property
    def device(self) -> torch.device: ...

    @property
    def dtype(self) -> torch.dtype: ...

    @property
    def latent_shape(self) -> tuple[int, int, int]: ...  # (C, h, w)

    @property
    def attn_hw(self) -> tuple[int, int]: ...

    @property
    def tokenizer(self) -> TokenizerInterface: ...

    def build_adapter(self, seed: int = 0) -> AdapterState: ...

    def encode_images(self, images: torch.Tensor) -> torch.Tensor: ...

    def add_noise(
        self, latents: torch.Tensor, noise: torch.Tensor, timesteps: torch.Tensor
    ) -> torch.Tensor: ...

    def embed_text(self, text: str, adapter: AdapterState) -> EncodedPrompt: ...

    def predict(
        self, adapter: AdapterState, noisy: torch.Tensor, timesteps: torch.Tensor, prompt: EncodedPrompt
    ) -> tuple[torch.Tensor, torch.Tensor]: ...

    def frozen_fingerprint(self) -> str: ...

    def generate(
        self, prompt: str, adapter: AdapterState, seed: int, steps: int, guidance: float
    ) -> torch.Tensor: ...
