import dataclasses

import numpy as np
import pytest

from rgbd_curriculum import model as M
from rgbd_curriculum.config import CurriculumConfig, StageSchedule
from rgbd_curriculum.curriculum import (
    Checkpoint,
    OptimizerState,
    ScheduleConfig,
    adamw_step,
    decode_checkpoint,
    encode_checkpoint,
    init_stage2_from_stage1,
    load_checkpoint,
    lr_at,
    make_stage2_batch,
    params_from_checkpoint,
    prepare,
    read_trace,
    save_checkpoint,
    stage2_forward,
    train_stage1,
    train_stage2,
    write_trace,
)
from rgbd_curriculum.curriculum.training import batch_schedule, rgb_patches, stage2_columns
from rgbd_curriculum.data import synthetic_dataset
from rgbd_curriculum.errors import (
    CompatibilityError,
    CorruptionError,
    FormatError,
    NumericError,
    StageTagError,
    TrainingError,
    VersionError,
)
from rgbd_curriculum.numerics import ComputationTape, ContractError, SeededRng, Tensor, backward, no_tape, precision
from tests.small import SMALL_SCENE, SMALL_VIT, small_cfg


@pytest.fixture(scope="module")
def small_data():
    return synthetic_dataset(20, 0, SMALL_SCENE)


def zero_lr():
    return StageSchedule(base_lr=0.0)


# -- optimizer and schedule ----------------------------------------------------------------

def test_adamw_scalar_hand_case(f64):
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    state = OptimizerState(betas=(0.9, 0.95), weight_decay=5e-2, eps=1e-8)
    adamw_step(p, {"w": np.array([1.0])}, state, lr=1e-4)
    expected = 1 - 1e-4 * (1 / (1 + 1e-8)) - 1e-4 * 5e-2 * 1
    assert p["w"].data[0] == pytest.approx(expected, abs=1e-15)
    assert round(expected, 7) == 0.999895


def test_adamw_null_update(f64):
    p = {"w": Tensor(np.array([0.3, -2.0]), requires_grad=True)}
    adamw_step(p, {"w": np.zeros(2)}, OptimizerState(weight_decay=0.0), lr=1e-2)
    np.testing.assert_array_equal(p["w"].data, [0.3, -2.0])


def test_adamw_is_deterministic(f64, rng):
    g = rng.normal(size=(3, 3))
    out = []
    for _ in range(2):
        p = {"w": Tensor(np.ones((3, 3)), requires_grad=True)}
        s = OptimizerState()
        adamw_step(p, {"w": g}, s, 1e-3)
        adamw_step(p, {"w": g}, s, 1e-3)
        out.append(p["w"].data.copy())
    np.testing.assert_array_equal(*out)


def test_adamw_rejects_non_finite_gradients_by_name(f64):
    p = {"enc.patch.w": Tensor(np.ones(2), requires_grad=True)}
    with pytest.raises(NumericError, match="enc.patch.w"):
        adamw_step(p, {"enc.patch.w": np.array([np.inf, 0.0])}, OptimizerState(), 1e-3)


def test_weight_decay_is_decoupled_and_skippable(f64):
    p = {"w": Tensor(np.array([2.0]), requires_grad=True), "b": Tensor(np.array([2.0]), requires_grad=True)}
    adamw_step(p, {"w": np.zeros(1), "b": np.zeros(1)}, OptimizerState(weight_decay=0.1), lr=0.5, no_decay={"b"})
    assert p["w"].data[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)
    assert p["b"].data[0] == 2.0


def test_lr_schedule_landmarks():
    s = ScheduleConfig(base_lr=1e-4, total_steps=110, warmup_steps=10, warmup_start_lr=1e-6)
    assert lr_at(10, s) == pytest.approx(1e-4)
    assert lr_at(110, s) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(60, s) == pytest.approx(5e-5)
    assert lr_at(0, s) == pytest.approx(1e-6)
    assert lr_at(5, s) == pytest.approx(1e-6 + (1e-4 - 1e-6) / 2)
    with pytest.raises(ContractError):
        lr_at(111, s)
    with pytest.raises(ContractError):
        ScheduleConfig(1e-4, total_steps=5, warmup_steps=6)


def test_lr_is_monotone_after_warmup():
    s = ScheduleConfig(1.0, 50, 5)
    lrs = [lr_at(t, s) for t in range(5, 51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# -- batching ------------------------------------------------------------------------------

def test_batches_drop_last_partial_and_reshuffle():
    r = SeededRng(0)
    e0 = batch_schedule(20, 8, r.child(0))
    e1 = batch_schedule(20, 8, r.child(1))
    assert [len(b) for b in e0] == [8, 8]
    assert len(set(np.concatenate(e0))) == 16
    assert not np.array_equal(np.concatenate(e0), np.concatenate(e1))
    np.testing.assert_array_equal(np.concatenate(e0), np.concatenate(batch_schedule(20, 8, SeededRng(0).child(0))))


# -- stage 1 ---------------------------------------------------------------------------------

def test_stage1_zero_lr_preserves_parameters(small_data):
    cfg = small_cfg(stage1=zero_lr(), batch_size=8)
    data = prepare(small_data)
    data = dataclasses.replace(data, rgb=data.rgb[:8], depth=data.depth[:8])
    res = train_stage1(cfg, data)
    init = M.init_stage1_params(cfg.vit, SeededRng(cfg.seed).child("init"))
    assert len(res.trace) == 1
    for k, v in init.items():
        np.testing.assert_array_equal(res.checkpoint.params[k], v.data)


def test_stage1_trace_columns_and_determinism(small_data):
    cfg = small_cfg()
    a, b = train_stage1(cfg, small_data), train_stage1(cfg, small_data)
    assert list(a.trace[0]) == ["step", "epoch", "lr", "loss_pnce"]
    assert a.trace_csv() == b.trace_csv()
    assert a.checkpoint.stage == "stage1"
    assert len(a.trace) == 2  # 16 train samples / batch 8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step(small_data):
    cfg = small_cfg(stage1=StageSchedule(base_lr=1e30))
    with pytest.raises(TrainingError) as info:
        train_stage1(dataclasses.replace(cfg, stage1_epochs=3), small_data)
    assert "step" in str(info.value)


# -- transfer ----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def stage1_result(small_data):
    return train_stage1(small_cfg(), small_data)


def test_transfer_copies_encoder_into_both_modalities(stage1_result, small_data):
    cfg = small_cfg()
    params = init_stage2_from_stage1(stage1_result.checkpoint, cfg)
    shared = params_from_checkpoint(stage1_result.checkpoint)
    x = rgb_patches(small_data.rgb[:4], cfg.vit.patch)
    with no_tape():
        ref = M.run_encoder(M.embed(x, shared, cfg.vit, "enc", "rgb"), shared, cfg.vit, "enc").data
        a = M.run_encoder(M.embed(x, params, cfg.vit, "enc_rgb", "rgb"), params, cfg.vit, "enc_rgb").data
        b = M.run_encoder(M.embed(x, params, cfg.vit, "enc_depth", "rgb"), params, cfg.vit, "enc_depth").data
    np.testing.assert_array_equal(a, ref)
    np.testing.assert_array_equal(b, ref)


def test_transfer_allocates_fresh_decoder(stage1_result):
    cfg = small_cfg()
    params = init_stage2_from_stage1(stage1_result.checkpoint, cfg)
    fresh = M.init_stage2_params(cfg.vit, SeededRng(cfg.seed).child("init"))
    assert set(params) == set(fresh)
    for k in fresh:
        if k.startswith(("dec.", "sigma.", "head.")):
            np.testing.assert_array_equal(params[k].data, fresh[k].data)
    np.testing.assert_array_equal(params["enc_depth.mod.depth"].data, stage1_result.checkpoint.params["enc.mod.depth"])


def test_transfer_has_no_aliasing(stage1_result):
    params = init_stage2_from_stage1(stage1_result.checkpoint, small_cfg())
    before = params["enc_depth.blocks.0.qkv.w"].data.copy()
    params["enc_rgb.blocks.0.qkv.w"].data += 1.0
    np.testing.assert_array_equal(params["enc_depth.blocks.0.qkv.w"].data, before)
    assert not np.shares_memory(params["enc_rgb.patch.w"].data, stage1_result.checkpoint.params["enc.patch.w"])


def test_transfer_contracts(stage1_result):
    ck = stage1_result.checkpoint
    with pytest.raises(StageTagError):
        init_stage2_from_stage1(dataclasses.replace(ck, stage="stage2"), small_cfg())
    wider = small_cfg(vit=dataclasses.replace(SMALL_VIT, enc_dim=32))
    with pytest.raises(CompatibilityError):
        init_stage2_from_stage1(ck, wider)


# -- stage 2 ------------------------------------------------------------------------------------

def test_stage2_trace_columns(small_data):
    res = train_stage2(small_cfg(stage2_epochs=1), small_data)
    assert list(res.trace[0]) == ["step", "epoch", "lr", "loss_depth", "loss_denoise", "loss_total"]
    assert stage2_columns(small_cfg(rgb_recon=True), contrastive=True) == [
        "step", "epoch", "lr", "loss_pnce", "loss_depth", "loss_denoise", "loss_rgb", "loss_total"]


def test_no_noise_switch_has_no_denoise_term(small_data):
    res = train_stage2(small_cfg(denoise="none", stage2_epochs=1), small_data)
    for row in res.trace:
        assert row["loss_denoise"] == 0.0
        assert row["loss_total"] == pytest.approx(row["loss_depth"], rel=1e-6)


def test_noise_only_switch_drops_beta(small_data):
    cfg = small_cfg(denoise="noise-only")
    data = prepare(small_data)
    rgb = rgb_patches(data.rgb[:4], 4)
    batch = make_stage2_batch(rgb, data.depth[:4], cfg, SeededRng(0))
    assert batch.noise is not None and batch.noise.sigma.max() > 0
    params = M.init_stage2_params(cfg.vit, SeededRng(0))
    with no_tape():
        terms = stage2_forward(params, cfg, batch)
    assert terms["denoise"] is not None
    assert terms["total"].item() == pytest.approx(terms["depth"].item(), rel=1e-6)


def test_stage2_zero_lr_preserves_parameters(small_data):
    cfg = small_cfg(stage2=zero_lr(), stage2_epochs=1)
    res = train_stage2(cfg, small_data)
    init = M.init_stage2_params(cfg.vit, SeededRng(cfg.seed).child("init"))
    for k, v in init.items():
        np.testing.assert_array_equal(res.checkpoint.params[k], v.data)


def test_stage2_targets_are_clean_and_noise_hits_full_patch_set(small_data):
    cfg = small_cfg()
    data = prepare(small_data)
    clean = data.depth[:3]
    batch = make_stage2_batch(rgb_patches(data.rgb[:3], 4), clean, cfg, SeededRng(1))
    from rgbd_curriculum.data import per_patch_normalize

    np.testing.assert_array_equal(batch.depth_target, per_patch_normalize(clean)[0])
    noisy = batch.depth_in.reshape(3, 16, 16, 3)[..., 0]
    np.testing.assert_allclose(noisy, clean + batch.noise.added(), rtol=1e-6)


def test_total_gradient_is_weighted_sum_of_terms(small_data):
    cfg = small_cfg(loss=dataclasses.replace(CurriculumConfig().loss, beta=0.3))
    with precision("float64"):
        data = prepare(small_data)
        batch = make_stage2_batch(rgb_patches(data.rgb[:2], 4), data.depth[:2].astype(np.float64), cfg, SeededRng(2))
        params = M.init_stage2_params(cfg.vit, SeededRng(0))

        def grads(term):
            for p in params.values():
                p.zero_grad()
            with ComputationTape() as tape:
                t = stage2_forward(params, cfg, batch)[term]
            return backward(t, tape)

        g_tot, g_dep, g_den = grads("total"), grads("depth"), grads("denoise")
    for name, g in g_tot.items():
        combo = cfg.loss.alpha * g_dep.get(name, 0.0) + cfg.loss.beta * g_den.get(name, 0.0)
        scale = max(np.abs(g).max(), 1e-12)
        assert np.abs(g - combo).max() / scale < 1e-5, name


def test_joint_variant_logs_contrastive_term(small_data):
    res = train_stage2(small_cfg(), small_data, contrastive=True, epochs=1)
    assert "loss_pnce" in res.trace[0] and res.trace[0]["loss_pnce"] > 0


def test_rgb_reconstruction_adds_term(small_data):
    res = train_stage2(small_cfg(rgb_recon=True, stage2_epochs=1), small_data)
    assert "head.rgb.w" in res.checkpoint.params
    assert res.trace[0]["loss_rgb"] > 0


# -- checkpoints -------------------------------------------------------------------------------

def test_checkpoint_round_trip_is_canonical(stage1_result, tmp_path):
    ck = stage1_result.checkpoint
    save_checkpoint(ck, tmp_path / "a.ckpt")
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert loaded.stage == "stage1" and loaded.seed == ck.seed and loaded.step == ck.step
    assert loaded.optimizer.step == ck.optimizer.step
    for k, v in ck.params.items():
        np.testing.assert_array_equal(loaded.params[k], v)


def test_checkpoint_header_layout(stage1_result):
    buf = encode_checkpoint(stage1_result.checkpoint)
    assert buf[:4] == b"CKPT" and buf[6] == 1
    assert buf[7:39] == stage1_result.checkpoint.fingerprint


def test_flipped_payload_byte_detected(stage1_result):
    buf = bytearray(encode_checkpoint(stage1_result.checkpoint))
    buf[len(buf) // 2] ^= 0xFF
    with pytest.raises(CorruptionError):
        decode_checkpoint(bytes(buf))


def test_checkpoint_magic_and_version(stage1_result):
    buf = bytearray(encode_checkpoint(stage1_result.checkpoint))
    bad = bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(bad)
    buf[4] = 7
    with pytest.raises(VersionError):
        decode_checkpoint(bytes(buf))


def test_stage_tag_enforced_on_load(stage1_result, tmp_path):
    save_checkpoint(stage1_result.checkpoint, tmp_path / "s1.ckpt")
    with pytest.raises(StageTagError):
        load_checkpoint(tmp_path / "s1.ckpt", stage="stage2")


def test_large_seed_survives_round_trip():
    ck = Checkpoint("finetuned", bytes(32), {"w": np.ones((2, 2), np.float32)}, seed=2**63 + 12345, step=7)
    out = decode_checkpoint(encode_checkpoint(ck))
    assert out.seed == 2**63 + 12345 and out.step == 7 and out.optimizer is None


# -- traces ------------------------------------------------------------------------------------

def test_trace_round_trip(stage1_result, tmp_path):
    write_trace(stage1_result.trace, tmp_path / "t.csv")
    back = read_trace(tmp_path / "t.csv")
    assert [r["loss_pnce"] for r in back] == pytest.approx([r["loss_pnce"] for r in stage1_result.trace])


def test_malformed_traces_rejected(tmp_path):
    (tmp_path / "a.csv").write_text("foo,bar\n1,2\n")
    (tmp_path / "b.csv").write_text("step,epoch,loss\n0,0,abc\n")
    for name in ("a.csv", "b.csv", "missing.csv"):
        with pytest.raises(FormatError):
            read_trace(tmp_path / name)


# -- desk-scale training progress (shared with the acceptance suite) ---------------------------

@pytest.mark.slow
def test_stage1_loss_decreases_on_default_benchmark(default_runs):
    for seed, run in default_runs.items():
        t = [r["loss_pnce"] for r in run.stage1_trace]
        assert t[-1] < t[0], seed


@pytest.mark.slow
def test_stage2_epoch_means_decrease_for_five_epochs(default_runs):
    for seed, run in default_runs.items():
        rows = run.stage2_trace
        means = [np.mean([r["loss_total"] for r in rows if r["epoch"] == e]) for e in range(6)]
        assert all(a > b for a, b in zip(means, means[1:])), (seed, means)
