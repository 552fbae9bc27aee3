"""Two-stage training loop: determinism, checkpoints, resume, and logging."""

import json

import pytest
import torch

from conftest import write_pair
from partweave.backbone import ToyBackbone
from partweave.batch import build_batch
from partweave.degradation import DegradationSchedule
from partweave.dual_stream import StepLossReport, TEACHER_EMA
from partweave.errors import CheckpointError, ConfigError, TrainingError
from partweave.losses import LossWeights
from partweave.pair import load_pair, prepare_masks, register_pseudo_words
from partweave.trainer import (
    CHECKPOINT_FORMAT_VERSION,
    STAGE_POST_DSBAL,
    STAGE_POST_WARMUP,
    TrainConfig,
    _make_optimizer,
    load_checkpoint,
    restore_tracker,
    run_dsbal,
    run_warmup,
    save_checkpoint,
    train_pair,
)

WEIGHTS = LossWeights()


@pytest.fixture
def pair32(tmp_path):
    return load_pair(write_pair(tmp_path / "pair", resolution=32))


def fresh_backbone():
    return ToyBackbone(resolution=32, model_dim=8, lora_rank=2, seed=0)


def quick_config(**overrides):
    base = dict(warmup_steps=6, dsbal_steps=8, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def _components(pair, backbone, config):
    mask_sets = prepare_masks(pair, backbone.latent_shape[1:], backbone.attn_hw)
    register_pseudo_words(pair, backbone.tokenizer)
    adapter = backbone.build_adapter(seed=config.seed)
    batch = build_batch(pair, mask_sets, backbone, config.prompt_template)
    schedule = DegradationSchedule(total_steps=config.total_steps)
    return adapter, batch, schedule


# -- config -----------------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_steps=-1)
    with pytest.raises(ConfigError):
        TrainConfig(warmup_steps=1, dsbal_steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(warmup_lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(teacher_mode="nope")


def test_effective_lr_scales_with_batch(pair32):
    backbone = fresh_backbone()
    config = quick_config()
    _, batch, _ = _components(pair32, backbone, config)
    assert batch.total_images == 4  # 2 samples x 2 images
    assert config.effective_lr(1e-4, batch) == pytest.approx(4e-4)
    unscaled = quick_config(lr_batch_scaling=False)
    assert unscaled.effective_lr(1e-4, batch) == 1e-4


def test_optimizer_embedding_group_lr(pair32):
    backbone = fresh_backbone()
    config = quick_config()
    adapter, _, _ = _components(pair32, backbone, config)
    opt = _make_optimizer(adapter, lr=1e-3, embedding_lr=5e-5, weight_decay=0.01)
    assert len(opt.param_groups) == 2
    assert opt.param_groups[0]["lr"] == 1e-3
    assert opt.param_groups[1]["lr"] == 5e-5
    assert len(opt.param_groups[1]["params"]) == 2  # one embedding per pseudo-word


# -- stage loops ---------------------------------------------------------------------


def test_warmup_zero_steps_leaves_adapter_untouched(pair32):
    backbone = fresh_backbone()
    config = quick_config(warmup_steps=0)
    adapter, batch, schedule = _components(pair32, backbone, config)
    before = adapter.flatten()
    reports = run_warmup(backbone, adapter, batch, schedule, config, WEIGHTS)
    assert reports == []
    assert torch.equal(adapter.flatten(), before)


def test_dsbal_zero_steps_returns_tracker_only(pair32):
    backbone = fresh_backbone()
    config = quick_config(dsbal_steps=0)
    adapter, batch, schedule = _components(pair32, backbone, config)
    before = adapter.flatten()
    tracker, reports = run_dsbal(backbone, adapter, batch, schedule, config, WEIGHTS)
    assert reports == []
    assert torch.equal(adapter.flatten(), before)
    assert torch.equal(tracker.params.flatten(), before)


def test_warmup_descends(pair32):
    backbone = fresh_backbone()
    config = quick_config(warmup_steps=30, dsbal_steps=0)
    adapter, batch, schedule = _components(pair32, backbone, config)
    reports = run_warmup(backbone, adapter, batch, schedule, config, WEIGHTS)
    first = sum(reports[0].per_sample_diffusion) / 2
    last = sum(reports[-1].per_sample_diffusion) / 2
    assert last < first


def test_warmup_steps_are_contiguous_and_staged(pair32):
    backbone = fresh_backbone()
    config = quick_config()
    adapter, batch, schedule = _components(pair32, backbone, config)
    warm = run_warmup(backbone, adapter, batch, schedule, config, WEIGHTS)
    _, bal = run_dsbal(backbone, adapter, batch, schedule, config, WEIGHTS)
    assert [r.step for r in warm + bal] == list(range(config.total_steps))
    assert {r.stage for r in warm} == {"warmup"}
    assert {r.stage for r in bal} == {"dsbal"}


def test_non_finite_loss_aborts_with_diagnostic(pair32):
    backbone = fresh_backbone()
    config = quick_config()
    adapter, batch, schedule = _components(pair32, backbone, config)
    with torch.no_grad():
        adapter["layer0.q.lora_b"].fill_(float("nan"))
    with pytest.raises(TrainingError) as exc:
        run_warmup(backbone, adapter, batch, schedule, config, WEIGHTS)
    msg = str(exc.value)
    assert "step 0" in msg and "warmup" in msg and "per_sample_diffusion" in msg


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, pair32):
    backbone = fresh_backbone()
    config = quick_config()
    adapter, batch, schedule = _components(pair32, backbone, config)
    run_warmup(backbone, adapter, batch, schedule, config, WEIGHTS)
    tracker, _ = run_dsbal(backbone, adapter, batch, schedule, config, WEIGHTS)

    path = tmp_path / "ckpt"
    save_checkpoint(path, adapter, STAGE_POST_DSBAL, "abc123", 7, tracker)
    payload = load_checkpoint(path)
    assert payload["format_version"] == CHECKPOINT_FORMAT_VERSION
    assert payload["stage"] == STAGE_POST_DSBAL
    assert payload["config_hash"] == "abc123"
    assert payload["seed"] == 7

    other = fresh_backbone()
    register_pseudo_words(pair32, other.tokenizer)
    restored = other.build_adapter(seed=config.seed)
    restored.load_state_dict(payload["adapter"])
    for key in adapter.keys:
        assert torch.equal(restored[key], adapter[key])

    re_tracker = restore_tracker(payload, restored)
    assert re_tracker.beta == tracker.beta
    assert re_tracker.mode == tracker.mode
    assert re_tracker.step_count == tracker.step_count
    assert torch.equal(re_tracker.params.flatten(), tracker.params.flatten())


def test_checkpoint_without_tracker(tmp_path, pair32):
    backbone = fresh_backbone()
    config = quick_config()
    adapter, _, _ = _components(pair32, backbone, config)
    path = tmp_path / "warm"
    save_checkpoint(path, adapter, STAGE_POST_WARMUP, "h", 0)
    payload = load_checkpoint(path)
    assert payload["momentum"] is None
    assert restore_tracker(payload, adapter) is None


def test_checkpoint_error_paths(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
    junk = tmp_path / "junk"
    junk.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(junk)
    stale = tmp_path / "stale"
    torch.save({"format_version": 999, "adapter": {}}, stale)
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(stale)
    assert "999" in str(exc.value)
    unversioned = tmp_path / "unversioned"
    torch.save({"adapter": {}}, unversioned)
    with pytest.raises(CheckpointError):
        load_checkpoint(unversioned)


# -- whole-pair runs ----------------------------------------------------------------


def test_train_pair_artifacts_and_log(tmp_path, pair32):
    config = quick_config()
    result = train_pair(
        pair32, fresh_backbone(), config, WEIGHTS, tmp_path / "run", config_hash="deadbeef"
    )
    assert result.batch_size == 4
    assert result.effective_warmup_lr == pytest.approx(4 * config.warmup_lr)
    assert result.effective_dsbal_lr == pytest.approx(4 * config.dsbal_lr)
    assert result.frozen_base_intact

    post = load_checkpoint(result.post_warmup_path)
    final = load_checkpoint(result.final_path)
    assert result.post_warmup_path.name == "post_warmup"
    assert result.final_path.name == "final"
    assert post["stage"] == STAGE_POST_WARMUP and post["momentum"] is None
    assert final["stage"] == STAGE_POST_DSBAL and final["momentum"] is not None
    assert post["config_hash"] == final["config_hash"] == "deadbeef"

    lines = [json.loads(l) for l in (tmp_path / "run" / "steps.log").read_text().splitlines()]
    assert len(lines) == config.total_steps
    assert [l["step"] for l in lines] == list(range(config.total_steps))
    schedule = DegradationSchedule(total_steps=config.total_steps)
    for l in lines:
        assert l["alpha"] == schedule.intensity(l["step"])
        if l["stage"] == "warmup":
            assert "n_max" not in l
        else:
            assert l["n_max"] in (1, 2) and "preserving" in l
    assert lines[config.warmup_steps - 1]["stage"] == "warmup"
    assert lines[config.warmup_steps]["stage"] == "dsbal"
    assert lines[-1]["alpha"] == 0.0


def test_train_pair_two_runs_bitwise_identical(tmp_path, pair32):
    config = quick_config()
    res_a = train_pair(pair32, fresh_backbone(), config, WEIGHTS, tmp_path / "a")
    res_b = train_pair(pair32, fresh_backbone(), config, WEIGHTS, tmp_path / "b")
    log_a = (tmp_path / "a" / "steps.log").read_bytes()
    log_b = (tmp_path / "b" / "steps.log").read_bytes()
    assert log_a == log_b
    fin_a = load_checkpoint(res_a.final_path)["adapter"]
    fin_b = load_checkpoint(res_b.final_path)["adapter"]
    assert set(fin_a) == set(fin_b)
    for key, tensor in fin_a.items():
        assert torch.equal(tensor, fin_b[key]), key


def test_resume_from_post_warmup_matches_uninterrupted(tmp_path, pair32):
    config = quick_config()
    full = train_pair(pair32, fresh_backbone(), config, WEIGHTS, tmp_path / "full")
    full_bal = [r.to_json_dict() for r in full.reports if r.stage == "dsbal"]

    # resume: fresh process state, adapter restored from the stage boundary
    backbone = fresh_backbone()
    adapter, batch, schedule = _components(pair32, backbone, config)
    adapter.load_state_dict(load_checkpoint(full.post_warmup_path)["adapter"])
    _, resumed = run_dsbal(backbone, adapter, batch, schedule, config, WEIGHTS)
    assert [r.to_json_dict() for r in resumed] == full_bal

    final = load_checkpoint(full.final_path)["adapter"]
    for key in adapter.keys:
        assert torch.equal(adapter[key], final[key]), key


def test_train_pair_respects_teacher_mode(tmp_path, pair32):
    config = quick_config(teacher_mode="frozen_warmup")
    result = train_pair(pair32, fresh_backbone(), config, WEIGHTS, tmp_path / "fw")
    payload = load_checkpoint(result.final_path)
    assert payload["momentum"]["mode"] == "frozen_warmup"
    # teacher froze at the warm-up snapshot
    post = load_checkpoint(result.post_warmup_path)["adapter"]
    for key, tensor in payload["momentum"]["params"].items():
        assert torch.equal(tensor, post[key]), key
