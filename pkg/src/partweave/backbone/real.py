"""Stable Diffusion adapter. Needs `diffusers` + `transformers` and local weights.

Import of the heavy stack is deferred to construction so the rest of the
package works on machines without it; construction raises
BackendUnavailableError with install guidance instead of an ImportError
stack trace.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

from .. import rng
from ..errors import BackendUnavailableError, ConfigError, TrainingError
from .base import AdapterState, EncodedPrompt

_ATTN_RES = 16  # collect cross-attention at 16x16 only


def _load_stack():
    try:
        import diffusers
        import transformers
    except ImportError as exc:
        raise BackendUnavailableError(
            "the real backbone needs the 'diffusers' and 'transformers' packages "
            "and a local Stable Diffusion v1.5 checkout; install them "
            "(pip install diffusers transformers accelerate) and pass "
            "backbone.model_path pointing at the weights, or use backbone.kind=toy"
        ) from exc
    return diffusers, transformers


class _HFTokenizerWrapper:
    """Adapts the CLIP tokenizer/text-encoder pair to the ingestion protocol."""

    def __init__(self, tokenizer, text_encoder):
        self._tok = tokenizer
        self._enc = text_encoder
        self.pending_inits: dict[str, np.ndarray] = {}

    def vocab_size(self) -> int:
        return len(self._tok)

    def has_token(self, token: str) -> bool:
        ids = self._tok.convert_tokens_to_ids([token])
        return ids[0] != self._tok.unk_token_id

    def add_token(self, token: str) -> int:
        added = self._tok.add_tokens([token])
        if added != 1:
            raise ConfigError(f"could not add token {token!r} to the tokenizer")
        self._enc.resize_token_embeddings(len(self._tok))
        return self._tok.convert_tokens_to_ids([token])[0]

    def encode(self, text: str) -> list[int]:
        ids = self._tok(text, add_special_tokens=False).input_ids
        return list(ids)

    def base_embedding(self, token_id: int) -> np.ndarray:
        table = self._enc.get_input_embeddings().weight
        return table[token_id].detach().float().cpu().numpy()

    def init_trainable_embedding(self, token_id: int, vector: np.ndarray) -> None:
        token = self._tok.convert_ids_to_tokens([token_id])[0]
        self.pending_inits[token] = np.asarray(vector, dtype=np.float32)
        with torch.no_grad():
            table = self._enc.get_input_embeddings().weight
            table[token_id] = torch.from_numpy(self.pending_inits[token]).to(table.dtype)


class RealBackbone:
    """Stable Diffusion v1.5 with low-rank adapters on cross-attention projections."""

    name = "real"
    num_train_timesteps = 1000

    def __init__(
        self,
        model_path: str = "runwayml/stable-diffusion-v1-5",
        resolution: int = 512,
        lora_rank: int = 32,
        lora_alpha: float = 32.0,
        seed: int = 0,
        device: str | None = None,
    ):
        diffusers, _ = _load_stack()
        self.resolution = resolution
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.seed = seed
        self._device = torch.device(device or ("cuda" if torch.cuda.is_available() else "cpu"))
        self._dtype = torch.float16 if self._device.type == "cuda" else torch.float32
        try:
            pipe = diffusers.StableDiffusionPipeline.from_pretrained(
                model_path, torch_dtype=self._dtype, safety_checker=None
            )
        except Exception as exc:
            raise BackendUnavailableError(
                f"could not load Stable Diffusion weights from {model_path!r}: {exc}"
            ) from exc
        pipe.to(self._device)
        self.vae = pipe.vae.requires_grad_(False)
        self.unet = pipe.unet.requires_grad_(False)
        self.text_encoder = pipe.text_encoder.requires_grad_(False)
        self.scheduler = diffusers.DDPMScheduler.from_config(pipe.scheduler.config)
        self.ddim = diffusers.DDIMScheduler.from_config(pipe.scheduler.config)
        self._tokenizer = _HFTokenizerWrapper(pipe.tokenizer, self.text_encoder)
        self._cross_attn_modules = self._find_cross_attention()
        self._attn_capture: list[torch.Tensor] = []
        self._capture_enabled = False
        self._install_hooks()

    # -- properties ----------------------------------------------------------

    @property
    def device(self) -> torch.device:
        return self._device

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (4, self.resolution // 8, self.resolution // 8)

    @property
    def attn_hw(self) -> tuple[int, int]:
        return (_ATTN_RES, _ATTN_RES)

    @property
    def tokenizer(self) -> _HFTokenizerWrapper:
        return self._tokenizer

    def frozen_fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.unet.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    # -- adapter -------------------------------------------------------------

    def _find_cross_attention(self) -> dict[str, torch.nn.Module]:
        mods = {}
        for name, mod in self.unet.named_modules():
            if name.endswith("attn2"):  # cross-attention blocks
                mods[name] = mod
        if not mods:
            raise BackendUnavailableError("no cross-attention modules found in the UNet")
        return mods

    def build_adapter(self, seed: int = 0) -> AdapterState:
        tensors: dict[str, torch.Tensor] = {}
        for name, mod in sorted(self._cross_attn_modules.items()):
            for proj_name, proj in (("q", mod.to_q), ("k", mod.to_k), ("v", mod.to_v)):
                fan_in = proj.in_features
                fan_out = proj.out_features
                a = rng.randn((fan_in, self.lora_rank), torch.float32, "real_lora", seed, name, proj_name)
                a = (a / np.sqrt(fan_in)).to(self._dtype).to(self._device)
                b = torch.zeros((self.lora_rank, fan_out), dtype=self._dtype, device=self._device)
                tensors[f"{name}.{proj_name}.lora_a"] = a
                tensors[f"{name}.{proj_name}.lora_b"] = b
        for token, vec in sorted(self._tokenizer.pending_inits.items()):
            tensors[AdapterState.EMBED_PREFIX + token] = (
                torch.from_numpy(vec.copy()).to(self._dtype).to(self._device)
            )
        adapter = AdapterState(tensors)
        adapter.requires_grad_(True)
        self._active_adapter: AdapterState | None = None
        return adapter

    def _install_hooks(self) -> None:
        backbone = self

        def make_pre_hook(name: str, proj_name: str, base_linear):
            orig_forward = base_linear.forward

            def forward(x):
                out = orig_forward(x)
                adapter = backbone._active_adapter
                if adapter is not None:
                    a = adapter.tensors.get(f"{name}.{proj_name}.lora_a")
                    b = adapter.tensors.get(f"{name}.{proj_name}.lora_b")
                    if a is not None and b is not None:
                        out = out + (backbone.lora_alpha / backbone.lora_rank) * (x @ a @ b)
                return out

            base_linear.forward = forward

        for name, mod in self._cross_attn_modules.items():
            make_pre_hook(name, "q", mod.to_q)
            make_pre_hook(name, "k", mod.to_k)
            make_pre_hook(name, "v", mod.to_v)
            mod.register_forward_hook(self._make_capture_hook(mod))

    def _make_capture_hook(self, attn_mod):
        backbone = self

        def hook(module, args, output):
            if not backbone._capture_enabled:
                return
            hidden = args[0]
            tokens = hidden.shape[1]
            if tokens != _ATTN_RES * _ATTN_RES:
                return
            # recompute the attention probabilities at this block
            encoder_hidden = args[1] if len(args) > 1 else None
            if encoder_hidden is None:
                return
            q = module.to_q(hidden)
            k = module.to_k(encoder_hidden)
            q = module.head_to_batch_dim(q)
            k = module.head_to_batch_dim(k)
            probs = module.get_attention_scores(q, k)
            heads = module.heads
            probs = probs.reshape(-1, heads, probs.shape[1], probs.shape[2]).mean(dim=1)
            backbone._attn_capture.append(probs.float())

        return hook

    # -- encoder / noising ----------------------------------------------------

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            posterior = self.vae.encode(images.to(self._device, self._dtype)).latent_dist
            return posterior.mean * self.vae.config.scaling_factor

    def add_noise(self, latents, noise, timesteps):
        return self.scheduler.add_noise(latents, noise, timesteps)

    # -- text ------------------------------------------------------------------

    def embed_text(self, text: str, adapter: AdapterState) -> EncodedPrompt:
        tok = self._tokenizer._tok
        batch = tok(
            text, padding="max_length", max_length=tok.model_max_length,
            truncation=True, return_tensors="pt",
        )
        ids = batch.input_ids.to(self._device)
        # trained pseudo-word embeddings live in the adapter; sync them into
        # the embedding table before encoding so gradients flow through it
        table = self.text_encoder.get_input_embeddings().weight
        for key, tensor in adapter.tensors.items():
            if key.startswith(AdapterState.EMBED_PREFIX):
                token = key[len(AdapterState.EMBED_PREFIX):]
                token_id = tok.convert_tokens_to_ids([token])[0]
                table.data[token_id] = tensor.detach().to(table.dtype)
        emb = self.text_encoder(ids).last_hidden_state.squeeze(0)
        positions: dict[str, int] = {}
        for idx, tid in enumerate(ids.squeeze(0).tolist()):
            positions.setdefault(tok.convert_ids_to_tokens([tid])[0], idx)
        return EncodedPrompt(
            text=text,
            token_ids=tuple(ids.squeeze(0).tolist()),
            embeddings=emb,
            positions=positions,
        )

    # -- denoiser ----------------------------------------------------------------

    def predict(self, adapter, noisy, timesteps, prompt):
        self._active_adapter = adapter
        self._attn_capture = []
        self._capture_enabled = True
        try:
            emb = prompt.embeddings.unsqueeze(0).expand(noisy.shape[0], -1, -1)
            eps_hat = self.unet(noisy, timesteps, encoder_hidden_states=emb).sample
        finally:
            self._capture_enabled = False
            self._active_adapter = None
        if not self._attn_capture:
            raise TrainingError("no 16x16 cross-attention maps were captured")
        probs = torch.stack(self._attn_capture, dim=0).mean(dim=0)  # (K, hw, L)
        k_imgs = noisy.shape[0]
        attn = probs.transpose(1, 2).reshape(k_imgs, -1, _ATTN_RES, _ATTN_RES)
        return eps_hat, attn

    # -- sampling -------------------------------------------------------------------

    def generate(self, prompt, adapter, seed, steps, guidance):
        self._active_adapter = adapter
        try:
            self.ddim.set_timesteps(steps, device=self._device)
            gen = torch.Generator(device="cpu").manual_seed(seed)
            c, h, w = self.latent_shape
            z = torch.randn((1, c, h, w), generator=gen).to(self._device, self._dtype)
            z = z * self.ddim.init_noise_sigma
            cond = self.embed_text(prompt, adapter).embeddings.unsqueeze(0)
            uncond = self.embed_text("", adapter).embeddings.unsqueeze(0)
            with torch.no_grad():
                for t in self.ddim.timesteps:
                    model_in = self.ddim.scale_model_input(z, t)
                    eps_c = self.unet(model_in, t, encoder_hidden_states=cond).sample
                    eps_u = self.unet(model_in, t, encoder_hidden_states=uncond).sample
                    eps = eps_u + guidance * (eps_c - eps_u)
                    z = self.ddim.step(eps, t, z).prev_sample
                image = self.vae.decode(z / self.vae.config.scaling_factor).sample
            return image.clamp(-1.0, 1.0).squeeze(0).float().cpu()
        finally:
            self._active_adapter = None
