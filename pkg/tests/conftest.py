"""Shared fixtures: synthetic pairs on disk and toy backbones."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import yaml
from PIL import Image

from partweave.backbone import ToyBackbone
from partweave.pair import load_pair


def smooth_image(rng: np.random.Generator, res: int, ncomp: int = 6) -> np.ndarray:
    """Random sum of 2D cosines: structured content that survives 4x pooling."""
    yy, xx = np.mgrid[0:res, 0:res] / res
    img = np.zeros((res, res, 3))
    for c in range(3):
        for _ in range(ncomp):
            fx, fy = rng.uniform(0.5, 4, size=2)
            ph = rng.uniform(0, 2 * np.pi, size=2)
            img[..., c] += (
                rng.uniform(0.3, 1.0)
                * np.cos(2 * np.pi * fx * xx + ph[0])
                * np.cos(2 * np.pi * fy * yy + ph[1])
            )
    img = img / np.abs(img).max()
    return ((img + 1) * 127.5).astype(np.uint8)


def write_pair(
    root: Path,
    resolution: int = 64,
    images_per_sample: int = 2,
    seed: int = 7,
    concept_box: tuple[int, int, int, int] = (16, 48, 16, 48),
    component_box: tuple[int, int, int, int] = (24, 40, 24, 40),
    share_images: bool = True,
    pair_id: str = "fixture",
) -> Path:
    """Materialize a synthetic concept/component pair; returns the config path.

    With share_images=True both samples reference the same files, so the
    concept's effective mask excludes the component region.
    """
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    shared = []
    for k in range(images_per_sample):
        path = root / f"shared_{k}.png"
        Image.fromarray(smooth_image(rng, resolution)).save(path)
        shared.append(path.name)
    samples = []
    boxes = {"concept": concept_box, "component": component_box}
    labels = {"concept": ("robot", "<robot>"), "component": ("visor", "<visor>")}
    for role in ("concept", "component"):
        y0, y1, x0, x1 = boxes[role]
        entries = []
        for k in range(images_per_sample):
            if share_images:
                image_name = shared[k]
            else:
                path = root / f"{role}_{k}.png"
                Image.fromarray(smooth_image(rng, resolution)).save(path)
                image_name = path.name
            mask = np.zeros((resolution, resolution), dtype=np.uint8)
            mask[y0:y1, x0:x1] = 255
            mask_path = root / f"{role}_m{k}.png"
            Image.fromarray(mask).save(mask_path)
            entries.append({"image": image_name, "mask": mask_path.name})
        label, pseudo = labels[role]
        samples.append(
            {"role": role, "category_label": label, "pseudo_word": pseudo, "images": entries}
        )
    config = {"pair_id": pair_id, "resolution": resolution, "samples": samples}
    path = root / "pair.yaml"
    path.write_text(yaml.safe_dump(config))
    return path


@pytest.fixture
def pair64(tmp_path):
    return load_pair(write_pair(tmp_path / "pair"))


@pytest.fixture
def pair_path64(tmp_path):
    return write_pair(tmp_path / "pair")


@pytest.fixture
def toy():
    return ToyBackbone(resolution=64)


@pytest.fixture
def toy_small():
    # narrow model for gradient checks and quick loops
    return ToyBackbone(resolution=32, model_dim=8, lora_rank=2)
