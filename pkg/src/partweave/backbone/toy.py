"""A tiny deterministic diffusion stand-in for CPU tests and experiments.

Everything runs in float64 on CPU so runs are bitwise reproducible and
finite-difference gradient checks are meaningful. The pieces mirror the real
stack shape-for-shape: an image encoder to a latent grid, a linear forward
noising rule, and a two-layer cross-attention denoiser whose linear
projections carry low-rank adapters.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np
import torch
import torch.nn.functional as F

from .. import rng
from ..errors import ConfigError, TrainingError
from .base import AdapterState, EncodedPrompt

_TOKEN_RE = re.compile(r"[a-z0-9<>_\-]+")
_PAD = "<pad>"

# names of the projections that get low-rank adapters, per attention layer
_PROJECTIONS = ("q", "k", "v", "out")


def _tokenize(text: str) -> list[str]:
    tokens = _TOKEN_RE.findall(text.lower())
    return tokens if tokens else [_PAD]


class ToyTokenizer:
    """Whitespace-ish tokenizer with an open vocabulary.

    Base embeddings are derived from the token string and the backbone seed,
    so ids can differ between runs while embeddings stay identical.
    """

    def __init__(self, embed_dim: int, seed: int):
        self.embed_dim = embed_dim
        self.seed = seed
        self._ids: dict[str, int] = {}
        self._strings: list[str] = []
        self._added: set[str] = set()
        self.pending_inits: dict[str, np.ndarray] = {}

    def vocab_size(self) -> int:
        return len(self._strings)

    def _intern(self, token: str) -> int:
        if token not in self._ids:
            self._ids[token] = len(self._strings)
            self._strings.append(token)
        return self._ids[token]

    def has_token(self, token: str) -> bool:
        return token in self._added

    def add_token(self, token: str) -> int:
        if token in self._added:
            raise ConfigError(f"token {token!r} already added")
        self._added.add(token)
        return self._intern(token)

    def token_string(self, token_id: int) -> str:
        return self._strings[token_id]

    def encode(self, text: str) -> list[int]:
        return [self._intern(tok) for tok in _tokenize(text)]

    def base_embedding(self, token_id: int) -> np.ndarray:
        token = self._strings[token_id]
        vec = rng.randn((self.embed_dim,), torch.float64, "toy_embed", self.seed, token)
        return vec.numpy()

    def init_trainable_embedding(self, token_id: int, vector: np.ndarray) -> None:
        if vector.shape != (self.embed_dim,):
            raise ConfigError(f"embedding init must be ({self.embed_dim},), got {vector.shape}")
        self.pending_inits[self._strings[token_id]] = np.array(vector, dtype=np.float64)


class ToyBackbone:
    """CPU float64 backbone: 4x average-pool encoder, linear noising, attention denoiser."""

    name = "toy"
    num_train_timesteps = 1000

    def __init__(
        self,
        resolution: int = 64,
        model_dim: int = 16,
        lora_rank: int = 4,
        lora_alpha: float = 32.0,
        seed: int = 0,
        num_layers: int = 2,
    ):
        if resolution % 4 != 0:
            raise ConfigError("toy backbone resolution must be divisible by 4")
        self.resolution = resolution
        self.model_dim = model_dim
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.seed = seed
        self.num_layers = num_layers
        self._tokenizer = ToyTokenizer(embed_dim=model_dim, seed=seed)

        m = model_dim

        def w(name: str, shape: tuple[int, ...], scale: float) -> torch.Tensor:
            return rng.randn(shape, torch.float64, "toy_frozen", seed, name) * scale

        self.frozen: dict[str, torch.Tensor] = {"w_in": w("w_in", (3, m), 1.0 / np.sqrt(3.0))}
        for i in range(num_layers):
            for proj in _PROJECTIONS:
                self.frozen[f"layer{i}.{proj}"] = w(f"layer{i}.{proj}", (m, m), 1.0 / np.sqrt(m))
        # decalibrated on purpose: the frozen net starts out loud and wrong,
        # adapters have to both silence it and build the real predictor
        self.frozen["w_read"] = w("w_read", (m, 3), 6.0 / np.sqrt(m))
        self.frozen["t_embed"] = w("t_embed", (m,), 1.0)
        for t in self.frozen.values():
            t.requires_grad_(False)

    # -- static properties --------------------------------------------------

    @property
    def device(self) -> torch.device:
        return torch.device("cpu")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (3, self.resolution // 4, self.resolution // 4)

    @property
    def attn_hw(self) -> tuple[int, int]:
        return self.latent_shape[1:]

    @property
    def tokenizer(self) -> ToyTokenizer:
        return self._tokenizer

    def frozen_fingerprint(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.frozen):
            h.update(key.encode())
            h.update(self.frozen[key].numpy().tobytes())
        return h.hexdigest()

    # -- adapter ------------------------------------------------------------

    def build_adapter(self, seed: int = 0) -> AdapterState:
        """Fresh low-rank factors plus any pseudo-word embeddings registered so far.

        The B factors start at zero so the adapted model initially equals the
        frozen one.
        """
        m, r = self.model_dim, self.lora_rank
        tensors: dict[str, torch.Tensor] = {}
        for i in range(self.num_layers):
            for proj in _PROJECTIONS:
                a = rng.randn((m, r), torch.float64, "toy_lora", self.seed, seed, i, proj) * 0.5
                tensors[f"layer{i}.{proj}.lora_a"] = a
                tensors[f"layer{i}.{proj}.lora_b"] = torch.zeros((r, m), dtype=torch.float64)
        tensors["w_in.lora_a"] = rng.randn((3, r), torch.float64, "toy_lora", self.seed, seed, "w_in") * 0.5
        tensors["w_in.lora_b"] = torch.zeros((r, m), dtype=torch.float64)
        tensors["w_read.lora_a"] = rng.randn((m, r), torch.float64, "toy_lora", self.seed, seed, "w_read") * 0.5
        tensors["w_read.lora_b"] = torch.zeros((r, 3), dtype=torch.float64)
        for token, vec in sorted(self._tokenizer.pending_inits.items()):
            tensors[AdapterState.EMBED_PREFIX + token] = torch.from_numpy(vec.copy())
        adapter = AdapterState(tensors)
        adapter.requires_grad_(True)
        return adapter

    def _effective(self, base_key: str, adapter: AdapterState) -> torch.Tensor:
        base = self.frozen[base_key]
        a = adapter.tensors.get(f"{base_key}.lora_a")
        b = adapter.tensors.get(f"{base_key}.lora_b")
        if a is None or b is None:
            return base
        return base + (self.lora_alpha / self.lora_rank) * (a @ b)

    # -- encoder / noising --------------------------------------------------

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        """(K, 3, H, W) in [-1, 1] -> (K, 3, H/4, W/4) by average pooling."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise TrainingError(f"expected (K, 3, H, W) images, got {tuple(images.shape)}")
        return F.avg_pool2d(images.to(self.dtype), kernel_size=4)

    def add_noise(
        self, latents: torch.Tensor, noise: torch.Tensor, timesteps: torch.Tensor
    ) -> torch.Tensor:
        """Linear mixing: z_t = (1 - t/T) * z + (t/T) * eps."""
        frac = (timesteps.to(self.dtype) / self.num_train_timesteps).view(-1, 1, 1, 1)
        return (1.0 - frac) * latents + frac * noise

    # -- text ---------------------------------------------------------------

    def embed_text(self, text: str, adapter: AdapterState) -> EncodedPrompt:
        ids = self._tokenizer.encode(text)
        rows = []
        positions: dict[str, int] = {}
        for idx, token_id in enumerate(ids):
            token = self._tokenizer.token_string(token_id)
            positions.setdefault(token, idx)
            trained = adapter.embedding(token)
            if trained is not None:
                rows.append(trained)
            else:
                rows.append(torch.from_numpy(self._tokenizer.base_embedding(token_id)))
        return EncodedPrompt(
            text=text,
            token_ids=tuple(ids),
            embeddings=torch.stack(rows, dim=0),
            positions=positions,
        )

    # -- denoiser -----------------------------------------------------------

    def predict(
        self,
        adapter: AdapterState,
        noisy: torch.Tensor,
        timesteps: torch.Tensor,
        prompt: EncodedPrompt,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Predict the noise and return per-token attention maps.

        Returns (eps_hat, attn) with eps_hat shaped like `noisy` and attn
        (K, L, h, w), averaged over the attention layers.
        """
        k_imgs, c, h, w = noisy.shape
        m = self.model_dim
        x = noisy.reshape(k_imgs, c, h * w).transpose(1, 2)  # (K, hw, 3)
        x = x @ self._effective("w_in", adapter)  # (K, hw, m)
        frac = (timesteps.to(self.dtype) / self.num_train_timesteps).view(-1, 1, 1)
        x = x + frac * self.frozen["t_embed"].view(1, 1, m)

        text = prompt.embeddings  # (L, m)
        attn_layers = []
        for i in range(self.num_layers):
            q = x @ self._effective(f"layer{i}.q", adapter)
            keys = text @ self._effective(f"layer{i}.k", adapter)
            vals = text @ self._effective(f"layer{i}.v", adapter)
            logits = q @ keys.T / np.sqrt(m)  # (K, hw, L)
            attn = torch.softmax(logits, dim=-1)
            attn_layers.append(attn)
            x = x + torch.tanh(attn @ vals) @ self._effective(f"layer{i}.out", adapter)

        eps_hat = (x @ self._effective("w_read", adapter)).transpose(1, 2).reshape(k_imgs, c, h, w)
        attn_mean = torch.stack(attn_layers, dim=0).mean(dim=0)  # (K, hw, L)
        attn_maps = attn_mean.transpose(1, 2).reshape(k_imgs, len(prompt.token_ids), h, w)
        return eps_hat, attn_maps

    # -- sampling -----------------------------------------------------------

    def generate(
        self, prompt: str, adapter: AdapterState, seed: int, steps: int, guidance: float
    ) -> torch.Tensor:
        """Euler sampling under the linear noising rule; returns (3, H, W) in [-1, 1].

        Cheap by construction; the point is a deterministic, adapter-dependent
        image for exercising the evaluation pipeline, not visual quality.
        """
        c, h, w = self.latent_shape
        z = rng.randn((1, c, h, w), self.dtype, "toy_generate", self.seed, prompt, seed)
        cond = self.embed_text(prompt, adapter)
        uncond = self.embed_text("", adapter)
        with torch.no_grad():
            for i in range(steps, 0, -1):
                f_cur = i / steps
                f_next = (i - 1) / steps
                t = torch.tensor([int(round(f_cur * (self.num_train_timesteps - 1)))])
                eps_c, _ = self.predict(adapter, z, t, cond)
                eps_u, _ = self.predict(adapter, z, t, uncond)
                eps = eps_u + guidance * (eps_c - eps_u)
                # z_f = (1-f)x + f*eps  =>  x_hat, then re-mix at the next level
                if f_cur < 1.0:
                    x_hat = (z - f_cur * eps) / (1.0 - f_cur)
                else:
                    x_hat = z - eps
                z = (1.0 - f_next) * x_hat + f_next * eps
        image = F.interpolate(z, scale_factor=4, mode="nearest").squeeze(0)
        # the untrained read head is loud, so z can sit far outside [-1, 1];
        # an affine squeeze keeps the structure a clamp would binarize away
        lo, hi = image.min(), image.max()
        if hi > lo:
            return 2.0 * (image - lo) / (hi - lo) - 1.0
        return torch.zeros_like(image)
