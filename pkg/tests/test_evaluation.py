"""Prompt suite, generation manifest, fidelity crops, and metric aggregation."""

import json
import random
from dataclasses import dataclass, field

import numpy as np
import pytest
import torch
from PIL import Image

from partweave.backbone import ToyBackbone
from partweave.errors import EvaluationError
from partweave.evaluation import (
    MODE_LABEL,
    MODE_PSEUDO,
    FullFrameSegmenter,
    GenSettings,
    PromptIndexScorer,
    PromptSuite,
    ScoreContext,
    StubScorer,
    aggregate_metrics,
    default_stub_scorers,
    fidelity_preprocess,
    generate_eval_images,
    render_prompt,
    tight_crop_resize,
)
from partweave.pair import register_pseudo_words

# the full benchmark suite, frozen byte for byte
EXPECTED_SUITE = [
    ("recontextualization", "<placeholder>, on the beach"),
    ("recontextualization", "<placeholder>, in the jungle"),
    ("recontextualization", "<placeholder>, in the snow"),
    ("recontextualization", "<placeholder>, at night"),
    ("recontextualization", "<placeholder>, in autumn"),
    ("restylization", "<placeholder>, watercolor painting"),
    ("restylization", "<placeholder>, Ukiyo-e painting"),
    ("restylization", "<placeholder>, in Pixel Art style"),
    ("restylization", "<placeholder>, in Von Gogh style"),
    ("restylization", "<placeholder>, in a comic book"),
    ("interaction", "<placeholder>, with clouds in the background"),
    ("interaction", "<placeholder>, with flowers in the background"),
    ("interaction", "<placeholder>, near the Eiffel Tower"),
    ("interaction", "<placeholder>, on top of water"),
    ("interaction", "<placeholder>, in front of the Mount Fuji"),
    ("property_modification", "<placeholder>, from 3D rendering"),
    ("property_modification", "<placeholder>, in a far view"),
    ("property_modification", "<placeholder>, in a close view"),
    ("property_modification", "<placeholder>, made of clay"),
    ("property_modification", "<placeholder>, made of plastic"),
]

SUITE_SHA256 = "f7adabb996adcfdbe128e97769c450a43d8c976f5e92d3774312fa02b1083d56"


def test_bundled_suite_byte_exact():
    suite = PromptSuite.bundled()
    assert len(suite) == 20
    got = [(t.aspect, t.text) for t in suite.templates]
    assert got == EXPECTED_SUITE
    assert [t.index for t in suite.templates] == list(range(20))
    assert suite.checksum() == SUITE_SHA256


def test_suite_from_file(tmp_path):
    path = tmp_path / "prompts.txt"
    path.write_text("a <placeholder> here\n\nanother <placeholder> there\n")
    suite = PromptSuite.from_file(path)
    assert len(suite) == 2
    assert suite.templates[0].aspect == "custom"
    assert suite.templates[1].text == "another <placeholder> there"
    with pytest.raises(EvaluationError):
        PromptSuite.from_file(tmp_path / "nope.txt")
    empty = tmp_path / "empty.txt"
    empty.write_text("# only a header\n")
    with pytest.raises(EvaluationError):
        PromptSuite.from_file(empty)


def test_suite_rejects_bad_placeholder_count(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("no placeholder at all\n")
    with pytest.raises(EvaluationError):
        PromptSuite.from_file(path)
    path.write_text("<placeholder> and <placeholder> twice\n")
    with pytest.raises(EvaluationError):
        PromptSuite.from_file(path)


def test_render_prompt_both_modes(pair64):
    template = "a photo of <placeholder>, on the beach"
    assert (
        render_prompt(template, pair64, MODE_PSEUDO)
        == "a photo of <robot> with <visor>, on the beach"
    )
    assert (
        render_prompt(template, pair64, MODE_LABEL)
        == "a photo of robot with visor, on the beach"
    )
    with pytest.raises(EvaluationError):
        render_prompt("no slot", pair64, MODE_PSEUDO)
    with pytest.raises(EvaluationError):
        render_prompt(template, pair64, "verbatim")


def test_gen_settings_seeds():
    s = GenSettings(images_per_prompt=4)
    assert s.seeds == (0, 1, 2, 3)
    s = GenSettings(images_per_prompt=2, seeds=(7, 9))
    assert s.seeds == (7, 9)
    with pytest.raises(EvaluationError):
        GenSettings(images_per_prompt=3, seeds=(1,))
    d = GenSettings().to_dict()
    assert d["sampler"] == "ddim" and d["steps"] == 50
    assert d["guidance_scale"] == 7.5 and d["images_per_prompt"] == 32
    assert d["seeds"] == list(range(32))


# -- generation ---------------------------------------------------------------------


@pytest.fixture
def gen_setup(pair64):
    backbone = ToyBackbone(resolution=64, model_dim=8, lora_rank=2, seed=0)
    register_pseudo_words(pair64, backbone.tokenizer)
    adapter = backbone.build_adapter(0)
    return backbone, adapter


def _tiny_suite(tmp_path, n=2):
    path = tmp_path / "tiny.txt"
    path.write_text("".join(f"prompt {i} <placeholder>\n" for i in range(n)))
    return PromptSuite.from_file(path)


def test_generate_eval_images_manifest_and_files(tmp_path, pair64, gen_setup):
    backbone, adapter = gen_setup
    suite = _tiny_suite(tmp_path)
    settings = GenSettings(steps=2, images_per_prompt=3)
    out = tmp_path / "eval"
    manifest = generate_eval_images(backbone, adapter, pair64, suite, settings, out)
    assert manifest["pair_id"] == pair64.pair_id
    assert manifest["settings"]["images_per_prompt"] == 3
    assert len(manifest["images"]) == 6
    on_disk = json.loads((out / "generation_manifest.json").read_text())
    assert on_disk == manifest
    entry = manifest["images"][0]
    assert entry["prompt_index"] == 0 and entry["seed"] == 0
    assert entry["prompt"] == "prompt 0 <robot> with <visor>"
    assert entry["template"] == "prompt 0 <placeholder>"
    assert entry["file"] == "images/p00_s000.png"
    for e in manifest["images"]:
        img = Image.open(out / e["file"])
        assert img.size == (64, 64)


def test_generate_eval_images_deterministic(tmp_path, pair64, gen_setup):
    backbone, adapter = gen_setup
    suite = _tiny_suite(tmp_path, n=1)
    settings = GenSettings(steps=2, images_per_prompt=2)
    m1 = generate_eval_images(backbone, adapter, pair64, suite, settings, tmp_path / "a")
    m2 = generate_eval_images(backbone, adapter, pair64, suite, settings, tmp_path / "b")
    for e1, e2 in zip(m1["images"], m2["images"]):
        b1 = (tmp_path / "a" / e1["file"]).read_bytes()
        b2 = (tmp_path / "b" / e2["file"]).read_bytes()
        assert b1 == b2
    # different seeds produce different bytes
    files = sorted((tmp_path / "a" / "images").iterdir())
    assert files[0].read_bytes() != files[1].read_bytes()


# -- fidelity preprocessing ------------------------------------------------------------


def _regions(h=8, w=8):
    concept = np.zeros((h, w), dtype=np.uint8)
    component = np.zeros((h, w), dtype=np.uint8)
    concept[0:6, 0:6] = 1
    component[2:4, 2:4] = 1
    return concept, component


def test_fidelity_preprocess_disjoint_oracle():
    gen = np.random.default_rng(0)
    image = gen.uniform(-1, 1, size=(3, 8, 8)).astype(np.float32)
    concept, component = _regions()
    crops = fidelity_preprocess(image, concept, component)
    assert not crops.concept_empty
    only = concept.astype(bool) & ~component.astype(bool)
    for c in range(3):
        for i in range(8):
            for j in range(8):
                want_c = image[c, i, j] if only[i, j] else 0.0
                want_p = image[c, i, j] if component[i, j] else 0.0
                assert crops.concept[c, i, j] == want_c
                assert crops.component[c, i, j] == want_p


def test_fidelity_preprocess_concept_swallowed_by_component():
    image = np.ones((3, 8, 8), dtype=np.float32)
    concept = np.zeros((8, 8), dtype=np.uint8)
    concept[2:4, 2:4] = 1
    component = np.ones((8, 8), dtype=np.uint8)  # covers everything
    crops = fidelity_preprocess(image, concept, component)
    assert crops.concept_empty and crops.concept is None
    assert crops.component is not None


def test_fidelity_preprocess_empty_component():
    image = np.ones((3, 8, 8), dtype=np.float32)
    concept, _ = _regions()
    crops = fidelity_preprocess(image, concept, np.zeros((8, 8), dtype=np.uint8))
    assert crops.component is None and not crops.concept_empty


def test_fidelity_preprocess_shape_errors():
    image = np.ones((3, 8, 8), dtype=np.float32)
    with pytest.raises(EvaluationError):
        fidelity_preprocess(np.ones((8, 8)), *_regions())
    with pytest.raises(EvaluationError):
        fidelity_preprocess(image, np.ones((4, 4)), np.ones((8, 8)))


def test_tight_crop_resize_constant_block():
    image = np.full((3, 16, 16), -1.0, dtype=np.float32)
    region = np.zeros((16, 16), dtype=np.uint8)
    region[4:10, 2:12] = 1
    image[:, 4:10, 2:12] = 0.5
    out = tight_crop_resize(image, region, size=8)
    assert out.shape == (3, 8, 8)
    # constant region stays constant through the uint8 round trip
    expected = round((0.5 + 1.0) * 127.5) / 127.5 - 1.0
    assert np.allclose(out, expected, atol=1e-6)
    with pytest.raises(EvaluationError):
        tight_crop_resize(image, np.zeros((16, 16), dtype=np.uint8), size=8)


# -- aggregation ------------------------------------------------------------------------


@dataclass
class CountingScorer:
    name: str
    kind: str
    version: str = "count-1"
    value_range: tuple = (0.0, 1.0)
    input_size: int = 32
    contexts: list = field(default_factory=list)

    def score(self, image, reference, context: ScoreContext) -> float:
        self.contexts.append(context)
        return 0.25


@dataclass(frozen=True)
class AllComponentSegmenter:
    name: str = "stub-allcomponent"

    def segment(self, image, labels):
        h, w = image.shape[1:]
        return np.ones((h, w), np.uint8), np.ones((h, w), np.uint8)


@pytest.fixture
def scored_run(tmp_path, pair64, gen_setup):
    backbone, adapter = gen_setup
    suite = _tiny_suite(tmp_path)
    settings = GenSettings(steps=2, images_per_prompt=3)
    out = tmp_path / "eval"
    manifest = generate_eval_images(backbone, adapter, pair64, suite, settings, out)
    return manifest, out


def test_aggregate_stub_means_exact(pair64, scored_run):
    manifest, out = scored_run
    report = aggregate_metrics(manifest, default_stub_scorers(), FullFrameSegmenter(), pair64, out)
    assert set(report.per_metric_means) == {"clip_t", "clip_i", "dino", "dreamsim"}
    for value in report.per_metric_means.values():
        assert value == 0.5
    assert report.excluded_images == []
    assert report.pair_id == pair64.pair_id
    assert report.crop_policy == "tight_bbox_resize"
    assert report.segmenter == "stub-fullframe"
    assert len(report.per_prompt) == 2
    for row in report.per_prompt:
        assert row["means"]["clip_t"] == 0.5
    names = [s["name"] for s in report.scorers]
    assert names == ["clip_t", "clip_i", "dino", "dreamsim"]


def test_aggregate_prompt_index_mean_exact(pair64, scored_run):
    manifest, out = scored_run
    scorer = PromptIndexScorer(name="pidx", kind="text")
    report = aggregate_metrics(manifest, [scorer], FullFrameSegmenter(), pair64, out)
    # prompts 0 and 1, three images each: mean = (0.00 * 3 + 0.01 * 3) / 6
    assert report.per_metric_means["pidx"] == pytest.approx(0.005, rel=0, abs=1e-15)
    assert report.per_prompt[0]["means"]["pidx"] == 0.0
    assert report.per_prompt[1]["means"]["pidx"] == pytest.approx(0.01, rel=0, abs=1e-15)


def test_aggregate_permutation_invariant(pair64, scored_run):
    manifest, out = scored_run
    scorers = [PromptIndexScorer(name="pidx", kind="text"), StubScorer(name="dino", kind="fidelity")]
    base = aggregate_metrics(manifest, scorers, FullFrameSegmenter(), pair64, out)
    shuffled = dict(manifest)
    shuffled["images"] = list(manifest["images"])
    random.Random(3).shuffle(shuffled["images"])
    again = aggregate_metrics(shuffled, scorers, FullFrameSegmenter(), pair64, out)
    assert again.to_json_dict() == base.to_json_dict()


def test_aggregate_text_scorer_sees_label_prompt(pair64, scored_run):
    manifest, out = scored_run

    @dataclass
    class PromptRecorder:
        name: str = "rec"
        kind: str = "text"
        version: str = "r1"
        value_range: tuple = (0.0, 1.0)
        input_size: int = 32
        prompts: list = field(default_factory=list)

        def score(self, image, reference, context):
            self.prompts.append(reference)
            return 0.0

    rec = PromptRecorder()
    aggregate_metrics(manifest, [rec], FullFrameSegmenter(), pair64, out)
    assert set(rec.prompts) == {"prompt 0 robot with visor", "prompt 1 robot with visor"}


def test_aggregate_scores_each_image_once(pair64, scored_run):
    manifest, out = scored_run
    text = CountingScorer(name="t", kind="text")
    fid = CountingScorer(name="f", kind="fidelity")
    aggregate_metrics(manifest, [text, fid], FullFrameSegmenter(), pair64, out)
    assert len(text.contexts) == 6
    assert [(c.prompt_index, c.seed) for c in text.contexts] == [
        (p, s) for p in range(2) for s in range(3)
    ]
    # fidelity sees 2 regions x 2 reference crops per image
    assert len(fid.contexts) == 6 * 4


def test_aggregate_fidelity_crops_are_resized(pair64, scored_run):
    manifest, out = scored_run

    @dataclass
    class ShapeChecker:
        name: str = "shape"
        kind: str = "fidelity"
        version: str = "s1"
        value_range: tuple = (0.0, 1.0)
        input_size: int = 16

        def score(self, image, reference, context):
            assert image.shape == (3, 16, 16)
            # references stay at native resolution with background zeroed
            assert reference.shape == (3, 64, 64)
            return 0.5

    aggregate_metrics(manifest, [ShapeChecker()], FullFrameSegmenter(), pair64, out)


def test_aggregate_exclusion_lists_all_when_concept_vanishes(pair64, scored_run):
    manifest, out = scored_run
    report = aggregate_metrics(
        manifest, [StubScorer(name="clip_t", kind="text")], AllComponentSegmenter(), pair64, out
    )
    assert len(report.excluded_images) == 6
    assert report.per_metric_means["clip_t"] == 0.5  # text scoring is unaffected
    with pytest.raises(EvaluationError):
        # fidelity scorers score nothing once every image is excluded
        aggregate_metrics(
            manifest, [StubScorer(name="dino", kind="fidelity")], AllComponentSegmenter(), pair64, out
        )


def test_aggregate_error_paths(pair64, scored_run, tmp_path):
    manifest, out = scored_run
    with pytest.raises(EvaluationError):
        aggregate_metrics(manifest, [], FullFrameSegmenter(), pair64, out)
    bad_kind = StubScorer(name="x", kind="holistic")
    with pytest.raises(EvaluationError):
        aggregate_metrics(manifest, [bad_kind], FullFrameSegmenter(), pair64, out)
    out_of_range = StubScorer(name="y", kind="text", value=2.0)
    with pytest.raises(EvaluationError):
        aggregate_metrics(manifest, [out_of_range], FullFrameSegmenter(), pair64, out)
    (out / manifest["images"][0]["file"]).unlink()
    with pytest.raises(EvaluationError) as exc:
        aggregate_metrics(manifest, default_stub_scorers(), FullFrameSegmenter(), pair64, out)
    assert "missing" in str(exc.value)


def test_report_json_round_trip(pair64, scored_run):
    manifest, out = scored_run
    report = aggregate_metrics(manifest, default_stub_scorers(), FullFrameSegmenter(), pair64, out)
    blob = json.dumps(report.to_json_dict())
    parsed = json.loads(blob)
    assert parsed["pair_id"] == pair64.pair_id
    assert parsed["settings"]["sampler"] == "ddim"
    assert set(parsed) == {
        "pair_id", "settings", "per_metric_means", "per_prompt",
        "excluded_images", "scorers", "crop_policy", "segmenter",
    }
