"""Loading and validating a concept-component pair from disk.

A pair is one concept (sample 1) and one component (sample 2), each with a
few reference images and a binary mask per image. Masks come in as 8-bit
single-channel files (0 = background, 255 = target); images as 8-bit RGB at
the configured resolution.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import yaml
from PIL import Image

from .errors import IngestionError

logger = logging.getLogger(__name__)

ROLE_CONCEPT = "concept"
ROLE_COMPONENT = "component"


@dataclass(frozen=True)
class ReferenceImage:
    """One reference image with its raw binary mask, pixels scaled to [-1, 1]."""

    pixels: np.ndarray  # (3, H, W) float32 in [-1, 1]
    raw_mask: np.ndarray  # (H, W) uint8 in {0, 1}
    source_path: str
    mask_path: str

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise IngestionError(f"expected (3, H, W) pixels, got {self.pixels.shape}")
        if self.raw_mask.shape != self.pixels.shape[1:]:
            raise IngestionError(
                f"mask shape {self.raw_mask.shape} does not match image "
                f"{self.pixels.shape[1:]} for {self.source_path}"
            )
        if not np.isin(self.raw_mask, (0, 1)).all():
            raise IngestionError(f"mask is not binary for {self.mask_path}")


@dataclass(frozen=True)
class SampleSpec:
    """One sample of the pair: the concept (n=1) or the component (n=2)."""

    index: int  # 1-based
    role: str
    category_label: str
    pseudo_word: str
    images: tuple[ReferenceImage, ...]

    def __post_init__(self) -> None:
        if self.role not in (ROLE_CONCEPT, ROLE_COMPONENT):
            raise IngestionError(f"unknown role {self.role!r}")
        expected = ROLE_CONCEPT if self.index == 1 else ROLE_COMPONENT
        if self.role != expected:
            raise IngestionError(
                f"sample {self.index} must have role {expected!r}, got {self.role!r}"
            )
        if not self.images:
            raise IngestionError(f"sample {self.index} has no reference images")
        if not self.category_label.strip():
            raise IngestionError(f"sample {self.index} has an empty category label")
        if not self.pseudo_word.strip():
            raise IngestionError(f"sample {self.index} has an empty pseudo-word")


@dataclass(frozen=True)
class PairSpec:
    """A validated concept-component pair."""

    pair_id: str
    resolution: int
    samples: tuple[SampleSpec, ...]

    def __post_init__(self) -> None:
        if len(self.samples) != 2:
            raise IngestionError(f"a pair needs exactly 2 samples, got {len(self.samples)}")

    @property
    def concept(self) -> SampleSpec:
        return self.samples[0]

    @property
    def component(self) -> SampleSpec:
        return self.samples[1]

    def image_count(self) -> int:
        return sum(len(s.images) for s in self.samples)

    def to_config_dict(self) -> dict:
        """Config-file form of this pair (paths only, no pixel data)."""
        return {
            "pair_id": self.pair_id,
            "resolution": self.resolution,
            "samples": [
                {
                    "role": s.role,
                    "category_label": s.category_label,
                    "pseudo_word": s.pseudo_word,
                    "images": [
                        {"image": img.source_path, "mask": img.mask_path} for img in s.images
                    ],
                }
                for s in self.samples
            ],
        }

    def digest(self) -> str:
        """Content hash over config fields and all pixel/mask bytes."""
        h = hashlib.sha256()
        h.update(repr(self.to_config_dict()).encode())
        for s in self.samples:
            for img in s.images:
                h.update(img.pixels.tobytes())
                h.update(img.raw_mask.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class MaskSet:
    """All mask variants needed by the losses, for one reference image."""

    effective_mask: np.ndarray  # (H, W) uint8, after concept/component exclusion
    latent_mask: np.ndarray  # (h, w) uint8, block-max downsampled
    attention_mask: np.ndarray  # (ha, wa) uint8, block-max downsampled


def pairs_equal(a: PairSpec, b: PairSpec) -> bool:
    """Full equality including pixel data (dataclass eq fails on arrays)."""
    if (a.pair_id, a.resolution) != (b.pair_id, b.resolution):
        return False
    for sa, sb in zip(a.samples, b.samples):
        if (sa.index, sa.role, sa.category_label, sa.pseudo_word) != (
            sb.index,
            sb.role,
            sb.category_label,
            sb.pseudo_word,
        ):
            return False
        if len(sa.images) != len(sb.images):
            return False
        for ia, ib in zip(sa.images, sb.images):
            if ia.source_path != ib.source_path or ia.mask_path != ib.mask_path:
                return False
            if not np.array_equal(ia.pixels, ib.pixels) or not np.array_equal(
                ia.raw_mask, ib.raw_mask
            ):
                return False
    return True


def _load_image(path: Path, resolution: int) -> np.ndarray:
    if not path.is_file():
        raise IngestionError(f"reference image not found: {path}")
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        if rgb.size != (resolution, resolution):
            raise IngestionError(
                f"image {path} is {rgb.size[0]}x{rgb.size[1]}, "
                f"expected {resolution}x{resolution}"
            )
        arr = np.asarray(rgb, dtype=np.float32)
    # 8-bit -> [-1, 1]
    arr = arr / 127.5 - 1.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _load_mask(path: Path, resolution: int) -> np.ndarray:
    if not path.is_file():
        raise IngestionError(f"mask file not found: {path}")
    with Image.open(path) as im:
        gray = im.convert("L")
        if gray.size != (resolution, resolution):
            raise IngestionError(
                f"mask {path} is {gray.size[0]}x{gray.size[1]}, "
                f"expected {resolution}x{resolution}"
            )
        arr = np.asarray(gray, dtype=np.uint8)
    distinct = np.unique(arr)
    if len(distinct) > 2:
        logger.warning(
            "mask %s has %d distinct gray levels; thresholding at 0.5", path, len(distinct)
        )
    # grayscale threshold 0.5 on [0, 1] scale, i.e. 128 on 8-bit
    return (arr >= 128).astype(np.uint8)


def load_pair(config_path: str | Path) -> PairSpec:
    """Load and validate a pair from its config file.

    The config is YAML with `pair_id`, `resolution` and two `samples`
    entries, each with `role`, `category_label`, `pseudo_word`, and
    `images: [{image, mask}]`. Relative paths resolve against the config
    file's directory.
    """
    config_path = Path(config_path)
    if not config_path.is_file():
        raise IngestionError(f"pair config not found: {config_path}")
    try:
        raw = yaml.safe_load(config_path.read_text())
    except yaml.YAMLError as exc:
        raise IngestionError(f"pair config {config_path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise IngestionError(f"pair config {config_path} must be a mapping")

    base = config_path.parent
    pair_id = raw.get("pair_id")
    if not pair_id:
        raise IngestionError(f"{config_path}: missing pair_id")
    resolution = int(raw.get("resolution", 512))
    if resolution <= 0:
        raise IngestionError(f"{config_path}: resolution must be positive")

    declared = raw.get("samples")
    if not isinstance(declared, list) or len(declared) != 2:
        raise IngestionError(f"{config_path}: exactly 2 samples must be declared")

    samples: list[SampleSpec] = []
    seen_pseudo: set[str] = set()
    for position, entry in enumerate(declared, start=1):
        if not isinstance(entry, dict):
            raise IngestionError(f"{config_path}: sample {position} must be a mapping")
        pseudo = str(entry.get("pseudo_word", ""))
        if pseudo in seen_pseudo:
            raise IngestionError(f"duplicate pseudo-word {pseudo!r} in {config_path}")
        seen_pseudo.add(pseudo)
        records = entry.get("images") or []
        images = []
        for rec in records:
            img_path = (base / rec["image"]).resolve()
            mask_path = (base / rec["mask"]).resolve()
            images.append(
                ReferenceImage(
                    pixels=_load_image(img_path, resolution),
                    raw_mask=_load_mask(mask_path, resolution),
                    source_path=str(img_path),
                    mask_path=str(mask_path),
                )
            )
        samples.append(
            SampleSpec(
                index=position,
                role=str(entry.get("role", "")),
                category_label=str(entry.get("category_label", "")),
                pseudo_word=pseudo,
                images=tuple(images),
            )
        )
    return PairSpec(pair_id=str(pair_id), resolution=resolution, samples=tuple(samples))


def block_max_downsample(mask: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Downsample a binary mask so an output cell is 1 if any covered pixel is 1.

    Max pooling keeps thin structures alive that area-averaging would erase.
    """
    h, w = mask.shape
    oh, ow = out_hw
    if h % oh != 0 or w % ow != 0:
        raise IngestionError(f"target size {out_hw} does not evenly divide mask size {(h, w)}")
    blocks = mask.reshape(oh, h // oh, ow, w // ow)
    return blocks.max(axis=(1, 3)).astype(np.uint8)


def prepare_masks(
    pair: PairSpec,
    latent_hw: tuple[int, int],
    attn_hw: tuple[int, int],
) -> dict[tuple[int, int], MaskSet]:
    """Build effective, latent and attention masks for every reference image.

    The concept's effective mask excludes the component's region whenever the
    same source file also appears in the component sample; the component's
    effective mask is its raw mask. Keys are (sample index, image index),
    both 1-based.
    """
    component_by_path: Mapping[str, np.ndarray] = {
        img.source_path: img.raw_mask for img in pair.component.images
    }
    out: dict[tuple[int, int], MaskSet] = {}
    for sample in pair.samples:
        for k, img in enumerate(sample.images, start=1):
            effective = img.raw_mask
            if sample.role == ROLE_CONCEPT:
                comp_region = component_by_path.get(img.source_path)
                if comp_region is not None:
                    effective = (effective & (1 - comp_region)).astype(np.uint8)
            if not effective.any():
                raise IngestionError(
                    f"effective mask is empty for sample {sample.index} image {k} "
                    "(component covers entire concept?)"
                )
            latent = block_max_downsample(effective, latent_hw)
            attention = block_max_downsample(effective, attn_hw)
            if not latent.any() or not attention.any():
                raise IngestionError(
                    f"downsampled mask is empty for sample {sample.index} image {k}"
                )
            out[(sample.index, k)] = MaskSet(
                effective_mask=effective, latent_mask=latent, attention_mask=attention
            )
    return out


class TokenizerInterface(Protocol):
    """Minimal text-side surface a backend exposes for pseudo-word setup."""

    def vocab_size(self) -> int: ...

    def has_token(self, token: str) -> bool: ...

    def add_token(self, token: str) -> int: ...

    def encode(self, text: str) -> list[int]: ...

    def base_embedding(self, token_id: int) -> np.ndarray: ...

    def init_trainable_embedding(self, token_id: int, vector: np.ndarray) -> None: ...


def register_pseudo_words(pair: PairSpec, tokenizer: TokenizerInterface) -> dict[str, int]:
    """Bind each pseudo-word to a fresh token.

    The new token's embedding starts as a copy of the embedding of the first
    token of the sample's category label, so the label acts as a semantic
    prior. Returns {pseudo_word: token_id}.
    """
    bindings: dict[str, int] = {}
    for sample in pair.samples:
        if tokenizer.has_token(sample.pseudo_word):
            raise IngestionError(
                f"pseudo-word {sample.pseudo_word!r} collides with an existing vocabulary token"
            )
        label_ids = tokenizer.encode(sample.category_label)
        if not label_ids:
            raise IngestionError(f"category label {sample.category_label!r} tokenizes to nothing")
        init_vec = np.array(tokenizer.base_embedding(label_ids[0]), copy=True)
        token_id = tokenizer.add_token(sample.pseudo_word)
        tokenizer.init_trainable_embedding(token_id, init_vec)
        bindings[sample.pseudo_word] = token_id
    return bindings
