"""Evaluation: prompt suite, seeded generation, fidelity crops, metric aggregation.

Scorers and the segmenter are plug-ins behind small protocols; the framework
never embeds metric model weights. Stub implementations cover pipeline tests
and give users the wiring pattern for real CLIP/DINO/DreamSim scorers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from PIL import Image

from .backbone.base import AdapterState, Backbone
from .errors import EvaluationError
from .pair import PairSpec, prepare_masks

PLACEHOLDER = "<placeholder>"
ASPECTS = ("recontextualization", "restylization", "interaction", "property_modification")
CROP_POLICY = "tight_bbox_resize"

MODE_PSEUDO = "pseudo"
MODE_LABEL = "label"


# -- prompt suite -------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    index: int
    aspect: str
    text: str


@dataclass(frozen=True)
class PromptSuite:
    templates: tuple[PromptTemplate, ...]

    def __post_init__(self) -> None:
        if not self.templates:
            raise EvaluationError("prompt suite is empty")
        for t in self.templates:
            if t.text.count(PLACEHOLDER) != 1:
                raise EvaluationError(
                    f"template {t.index} must contain exactly one {PLACEHOLDER}: {t.text!r}"
                )

    def __len__(self) -> int:
        return len(self.templates)

    @staticmethod
    def _parse(lines: Sequence[str], origin: str) -> "PromptSuite":
        templates = []
        aspect = "custom"
        for line in lines:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                aspect = line.lstrip("#").strip() or aspect
                continue
            templates.append(PromptTemplate(index=len(templates), aspect=aspect, text=line))
        if not templates:
            raise EvaluationError(f"no prompt templates found in {origin}")
        return PromptSuite(templates=tuple(templates))

    @classmethod
    def bundled(cls) -> "PromptSuite":
        text = resources.files("partweave.data").joinpath("suite.txt").read_text()
        suite = cls._parse(text.splitlines(), "bundled suite")
        if len(suite) != 20:
            raise EvaluationError(f"bundled suite must have 20 templates, found {len(suite)}")
        return suite

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptSuite":
        path = Path(path)
        if not path.is_file():
            raise EvaluationError(f"prompt file not found: {path}")
        return cls._parse(path.read_text().splitlines(), str(path))

    def checksum(self) -> str:
        import hashlib

        joined = "\n".join(t.text for t in self.templates)
        return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def render_prompt(template: str, pair: PairSpec, mode: str) -> str:
    """Fill the placeholder with '{p1} with {p2}' (pseudo) or '{c1} with {c2}' (label)."""
    if template.count(PLACEHOLDER) != 1:
        raise EvaluationError(f"template must contain exactly one {PLACEHOLDER}: {template!r}")
    concept, component = pair.concept, pair.component
    if mode == MODE_PSEUDO:
        subject = f"{concept.pseudo_word} with {component.pseudo_word}"
    elif mode == MODE_LABEL:
        subject = f"{concept.category_label} with {component.category_label}"
    else:
        raise EvaluationError(f"unknown render mode {mode!r}")
    return template.replace(PLACEHOLDER, subject)


# -- generation settings + manifest ---------------------------------------------


@dataclass(frozen=True)
class GenSettings:
    sampler: str = "ddim"
    steps: int = 50
    guidance_scale: float = 7.5
    images_per_prompt: int = 32
    seeds: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.seeds:
            object.__setattr__(self, "seeds", tuple(range(self.images_per_prompt)))
        if len(self.seeds) != self.images_per_prompt:
            raise EvaluationError(
                f"{len(self.seeds)} seeds for {self.images_per_prompt} images per prompt"
            )

    def to_dict(self) -> dict:
        return {
            "sampler": self.sampler,
            "steps": self.steps,
            "guidance_scale": self.guidance_scale,
            "images_per_prompt": self.images_per_prompt,
            "seeds": list(self.seeds),
        }


def _save_image(tensor: torch.Tensor, path: Path) -> None:
    arr = tensor.clamp(-1.0, 1.0).numpy()
    arr = ((arr.transpose(1, 2, 0) + 1.0) * 127.5).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def generate_eval_images(
    backbone: Backbone,
    adapter: AdapterState,
    pair: PairSpec,
    suite: PromptSuite,
    settings: GenSettings,
    out_dir: str | Path,
) -> dict:
    """Render every (prompt, seed) image and write the generation manifest.

    Deterministic per (prompt index, seed): regenerating a unit gives
    identical file bytes on the same backend.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for template in suite.templates:
        prompt = render_prompt(template.text, pair, MODE_PSEUDO)
        for seed in settings.seeds:
            filename = f"p{template.index:02d}_s{seed:03d}.png"
            image = backbone.generate(prompt, adapter, seed, settings.steps, settings.guidance_scale)
            _save_image(image.cpu(), images_dir / filename)
            entries.append(
                {
                    "prompt_index": template.index,
                    "aspect": template.aspect,
                    "prompt": prompt,
                    "template": template.text,
                    "seed": seed,
                    "file": str(Path("images") / filename),
                }
            )
    manifest = {
        "pair_id": pair.pair_id,
        "backbone": backbone.name,
        "settings": settings.to_dict(),
        "images": entries,
    }
    (out_dir / "generation_manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


# -- fidelity preprocessing -------------------------------------------------------


@dataclass(frozen=True)
class FidelityCrops:
    """Region-isolated views of one image; None means the region was empty."""

    concept: np.ndarray | None  # (3, H, W), zero outside concept-minus-component
    component: np.ndarray | None
    concept_empty: bool


def fidelity_preprocess(
    image: np.ndarray, concept_region: np.ndarray, component_region: np.ndarray
) -> FidelityCrops:
    """Isolate the concept (minus the component) and the component, zeroing the rest."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise EvaluationError(f"expected (3, H, W) image, got {image.shape}")
    if concept_region.shape != image.shape[1:] or component_region.shape != image.shape[1:]:
        raise EvaluationError("region masks must match image spatial dims")
    concept_only = (concept_region.astype(bool) & ~component_region.astype(bool))
    component_only = component_region.astype(bool)
    concept_crop = image * concept_only[None] if concept_only.any() else None
    component_crop = image * component_only[None] if component_only.any() else None
    return FidelityCrops(
        concept=concept_crop,
        component=component_crop,
        concept_empty=not concept_only.any(),
    )


def tight_crop_resize(image: np.ndarray, region: np.ndarray, size: int) -> np.ndarray:
    """Cut the region's bounding box and resize to (3, size, size) for a scorer."""
    ys, xs = np.nonzero(region)
    if len(ys) == 0:
        raise EvaluationError("cannot crop an empty region")
    crop = image[:, ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
    u8 = ((crop.transpose(1, 2, 0) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    resized = Image.fromarray(u8).resize((size, size), Image.BILINEAR)
    out = np.asarray(resized, dtype=np.float32) / 127.5 - 1.0
    return out.transpose(2, 0, 1)


# -- scorer / segmenter plug-ins -----------------------------------------------------


@dataclass(frozen=True)
class ScoreContext:
    prompt_index: int
    seed: int
    aspect: str


class Scorer(Protocol):
    """One metric. `kind` is 'text' (scored against the label-mode prompt)
    or 'fidelity' (scored against preprocessed reference crops)."""

    name: str
    version: str
    kind: str
    value_range: tuple[float, float]
    input_size: int

    def score(self, image: np.ndarray, reference, context: ScoreContext) -> float: ...


class Segmenter(Protocol):
    """Finds the concept and component regions in a generated image."""

    name: str

    def segment(
        self, image: np.ndarray, labels: tuple[str, str]
    ) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class StubScorer:
    """Returns a constant; exercises aggregation without metric models."""

    name: str
    kind: str
    value: float = 0.5
    version: str = "stub-1"
    value_range: tuple[float, float] = (0.0, 1.0)
    input_size: int = 32

    def score(self, image, reference, context) -> float:
        return self.value


@dataclass(frozen=True)
class PromptIndexScorer:
    """Returns prompt_index / 100; pins aggregation arithmetic in tests."""

    name: str
    kind: str
    version: str = "stub-1"
    value_range: tuple[float, float] = (0.0, 1.0)
    input_size: int = 32

    def score(self, image, reference, context) -> float:
        return context.prompt_index / 100.0


@dataclass(frozen=True)
class FullFrameSegmenter:
    """Stub segmenter: whole frame is the concept, a centered box the component."""

    name: str = "stub-fullframe"
    component_fraction: float = 0.25

    def segment(self, image, labels):
        h, w = image.shape[1:]
        concept = np.ones((h, w), dtype=np.uint8)
        component = np.zeros((h, w), dtype=np.uint8)
        bh, bw = int(h * self.component_fraction), int(w * self.component_fraction)
        y0, x0 = (h - bh) // 2, (w - bw) // 2
        component[y0 : y0 + bh, x0 : x0 + bw] = 1
        return concept, component


def default_stub_scorers() -> list:
    return [
        StubScorer(name="clip_t", kind="text"),
        StubScorer(name="clip_i", kind="fidelity"),
        StubScorer(name="dino", kind="fidelity"),
        StubScorer(name="dreamsim", kind="fidelity"),
    ]


# -- aggregation -----------------------------------------------------------------


@dataclass
class MetricReport:
    pair_id: str
    settings: dict
    per_metric_means: dict[str, float]
    per_prompt: list[dict]
    excluded_images: list[str]
    scorers: list[dict]
    crop_policy: str = CROP_POLICY
    segmenter: str = ""

    def to_json_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "settings": self.settings,
            "per_metric_means": self.per_metric_means,
            "per_prompt": self.per_prompt,
            "excluded_images": self.excluded_images,
            "scorers": self.scorers,
            "crop_policy": self.crop_policy,
            "segmenter": self.segmenter,
        }


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return (arr / 127.5 - 1.0).transpose(2, 0, 1)


def _reference_crops(pair: PairSpec) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Ground-truth crops from the reference images, via their ingestion masks."""
    h = pair.resolution
    # latent/attention dims are irrelevant here; reuse mask prep only for the
    # concept-minus-component exclusion at pixel level
    mask_sets = prepare_masks(pair, (h, h), (h, h))
    concept_crops, component_crops = [], []
    for k, img in enumerate(pair.concept.images, start=1):
        region = mask_sets[(1, k)].effective_mask
        concept_crops.append(img.pixels * region[None])
    for k, img in enumerate(pair.component.images, start=1):
        component_crops.append(img.pixels * img.raw_mask[None])
    return concept_crops, component_crops


def aggregate_metrics(
    manifest: dict,
    scorers: Sequence,
    segmenter,
    pair: PairSpec,
    run_dir: str | Path,
) -> MetricReport:
    """Score every manifest image with every scorer once and average.

    Text scorers see the full image against the label-mode prompt; fidelity
    scorers see tight-cropped concept/component regions against the reference
    crops (each generated crop is averaged over references, the two region
    scores are averaged, and empty-concept images are excluded and listed).
    Entries are processed in (prompt_index, seed) order, so the report does
    not depend on manifest ordering.
    """
    if not scorers:
        raise EvaluationError("no scorers registered")
    run_dir = Path(run_dir)
    entries = sorted(manifest["images"], key=lambda e: (e["prompt_index"], e["seed"]))
    missing = [e["file"] for e in entries if not (run_dir / e["file"]).is_file()]
    if missing:
        raise EvaluationError(f"manifest lists {len(missing)} missing files, first: {missing[0]}")

    ref_concept, ref_component = _reference_crops(pair)
    labels = (pair.concept.category_label, pair.component.category_label)

    values: dict[str, list[float]] = {s.name: [] for s in scorers}
    per_prompt_values: dict[int, dict[str, list[float]]] = {}
    excluded: list[str] = []

    for entry in entries:
        image = _load_image(run_dir / entry["file"])
        context = ScoreContext(
            prompt_index=entry["prompt_index"], seed=entry["seed"], aspect=entry["aspect"]
        )
        label_prompt = render_prompt(entry["template"], pair, MODE_LABEL)
        concept_region, component_region = segmenter.segment(image, labels)
        crops = fidelity_preprocess(image, concept_region, component_region)
        if crops.concept_empty:
            excluded.append(entry["file"])
        bucket = per_prompt_values.setdefault(entry["prompt_index"], {s.name: [] for s in scorers})
        for scorer in scorers:
            if scorer.kind == "text":
                value = scorer.score(image, label_prompt, context)
            elif scorer.kind == "fidelity":
                if crops.concept_empty:
                    continue
                region_scores = []
                concept_only = concept_region.astype(bool) & ~component_region.astype(bool)
                pieces = [(crops.concept, concept_only, ref_concept)]
                if crops.component is not None:
                    pieces.append((crops.component, component_region, ref_component))
                for crop, region, refs in pieces:
                    prepared = tight_crop_resize(crop, region, scorer.input_size)
                    ref_scores = [scorer.score(prepared, ref, context) for ref in refs]
                    region_scores.append(sum(ref_scores) / len(ref_scores))
                value = sum(region_scores) / len(region_scores)
            else:
                raise EvaluationError(f"scorer {scorer.name} has unknown kind {scorer.kind!r}")
            values[scorer.name].append(value)
            bucket[scorer.name].append(value)

    per_metric_means = {}
    for scorer in scorers:
        vals = values[scorer.name]
        if not vals:
            raise EvaluationError(f"scorer {scorer.name} scored no images")
        mean = float(sum(vals) / len(vals))
        lo, hi = scorer.value_range
        if not lo <= mean <= hi:
            raise EvaluationError(f"{scorer.name} mean {mean} outside declared range [{lo}, {hi}]")
        per_metric_means[scorer.name] = mean

    per_prompt = []
    by_index = {t["prompt_index"]: t for t in entries}
    for prompt_index in sorted(per_prompt_values):
        stats = {
            name: (float(sum(v) / len(v)) if v else None)
            for name, v in per_prompt_values[prompt_index].items()
        }
        per_prompt.append(
            {
                "prompt_index": prompt_index,
                "template": by_index[prompt_index]["template"],
                "means": stats,
            }
        )

    return MetricReport(
        pair_id=manifest["pair_id"],
        settings=manifest["settings"],
        per_metric_means=per_metric_means,
        per_prompt=per_prompt,
        excluded_images=excluded,
        scorers=[
            {"name": s.name, "version": s.version, "range": list(s.value_range), "kind": s.kind}
            for s in scorers
        ],
        segmenter=getattr(segmenter, "name", segmenter.__class__.__name__),
    )
