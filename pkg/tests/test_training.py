import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from ratecascade import tensor as tn
from ratecascade.checkpoint import MULTI_RATE, SINGLE_RATE, checkpoint_bytes, checkpoint_from_bytes
from ratecascade.denoiser import ModelConfig
from ratecascade.errors import ContractError, TrainingError
from ratecascade.formats import make_scenes
from ratecascade.training import (NoiseSchedule, TrainConfig, TrainLog, TrainingData, anchor_slots,
                                  eval_loss, fm_loss, interpolate, learning_rate_at, logit_normal_cdf,
                                  logit_normal_pdf, make_batch, new_checkpoint, run_stage1,
                                  run_stage2, sample_t, sample_t_unshifted, stage1_config,
                                  stage2_config, train_step)

CFG = ModelConfig(frame_dim=4, width=16, layers=2, heads=2, cond_dim=8, max_T=64)


@pytest.fixture(scope="module")
def data():
    return TrainingData(make_scenes(30, 0.3, 2, frame_dim=4))


def test_logit_normal_density_at_half():
    assert logit_normal_pdf(0.5) == pytest.approx(4 / math.sqrt(2 * math.pi), rel=1e-12)


def test_central_bin_histogram():
    t = sample_t_unshifted(NoiseSchedule(), 0, size=1_000_000)
    w = 0.01
    density = np.mean(np.abs(t - 0.5) < w / 2) / w
    assert density == pytest.approx(4 / math.sqrt(2 * math.pi), rel=0.02)


def test_pre_shift_samples_pass_ks():
    t = sample_t_unshifted(NoiseSchedule(), 1, size=100_000)
    assert stats.kstest(t, logit_normal_cdf).pvalue > 0.01


def test_shift_map_properties():
    s = NoiseSchedule()
    assert s.shift(0.0) == 0.0 and s.shift(1.0) == 1.0
    grid = np.linspace(0, 1, 10_001)
    assert np.all(np.diff(s.shift(grid)) > 0)
    np.testing.assert_array_equal(NoiseSchedule(sigma_shift=1.0).shift(grid), grid)
    assert s.shift(0.5) == pytest.approx(0.75)


def test_schedule_validation():
    with pytest.raises(ContractError):
        NoiseSchedule(s_scale=0.0)
    with pytest.raises(ContractError):
        NoiseSchedule(sigma_shift=0.5)


@given(st.integers(0, 2 ** 32 - 1))
def test_sample_t_strictly_inside(seed):
    t = sample_t(NoiseSchedule(s_scale=6.0), seed, size=64)
    assert np.all((t > 0) & (t < 1))
    assert 0 < sample_t(NoiseSchedule(), seed) < 1


def test_interpolate():
    z0, z1 = np.zeros(3), np.ones(3)
    np.testing.assert_array_equal(interpolate(z0, z1, 0.0), z0)
    np.testing.assert_array_equal(interpolate(z0, z1, 1.0), z1)
    assert interpolate(0.0, 1.0, 0.5) == 0.5
    with pytest.raises(ContractError):
        interpolate(np.zeros(2), np.zeros(3), 0.5)
    with pytest.raises(ContractError):
        interpolate(z0, z1, 1.5)


def test_warmup_schedule():
    c = stage1_config(warmup_steps=200, learning_rate=5e-4)
    assert learning_rate_at(c, 50) == 5e-4 * 50 / 200
    assert learning_rate_at(c, 200) == learning_rate_at(c, 5000) == 5e-4
    assert learning_rate_at(replace(c, warmup_steps=0), 1) == 5e-4


def test_config_defaults_and_validation():
    s1, s2 = stage1_config(), stage2_config()
    assert (s1.learning_rate, s1.weight_decay, s1.ema_decay, s1.batch_size) == (5e-4, 1e-4, 0.999, 32)
    assert s2.learning_rate == 2e-5 and s2.levels == (0, 1, 2)
    assert TrainConfig.from_dict(s2.to_dict()) == s2
    with pytest.raises(ContractError):
        TrainConfig(ema_decay=1.0)
    with pytest.raises(ContractError):
        TrainConfig(rate_set=(10.0,)).levels


def test_loss_zero_when_prediction_is_exact(data, monkeypatch):
    import ratecascade.training as training

    batch = make_batch(data, stage1_config(batch_size=2), 0)
    rng_for_target = np.random.default_rng(0)
    # replay the draws fm_loss makes, then return exactly z1 - z0
    def oracle(params, cfg, channels, t, prompts, indices):
        z0 = np.stack([ex.frames for ex in batch]).astype(np.float32)
        rng = np.random.default_rng(0)
        sample_t(NoiseSchedule(), rng, size=len(batch))
        z1 = rng.standard_normal(z0.shape).astype(np.float32)
        return tn.Tensor(z1 - z0)

    monkeypatch.setattr(training, "forward_batch", oracle)
    params = new_checkpoint(CFG, stage1_config()).params
    assert float(fm_loss(params, CFG, batch, NoiseSchedule(), rng_for_target).data) == 0.0


def test_initial_loss_finite_positive(data):
    ck = new_checkpoint(CFG, stage1_config())
    params = {k: tn.Tensor(v) for k, v in ck.params.items()}
    loss = float(fm_loss(params, CFG, make_batch(data, stage1_config(batch_size=4), 0),
                         NoiseSchedule(), 0).data)
    assert math.isfinite(loss) and loss > 0


def test_zero_learning_rate_keeps_parameters(data):
    c = stage1_config(batch_size=4, learning_rate=0.0, weight_decay=0.0)
    ck = new_checkpoint(CFG, c)
    before = {k: v.copy() for k, v in ck.params.items()}
    train_step(ck, make_batch(data, c, 0), c)
    for k in before:
        np.testing.assert_array_equal(ck.params[k], before[k])
    assert ck.step == 1


def test_ema_after_one_step(data):
    c = stage1_config(batch_size=4, warmup_steps=0)
    ck = new_checkpoint(CFG, c)
    old = {k: v.copy() for k, v in ck.ema.items()}
    train_step(ck, make_batch(data, c, 0), c)
    for k in old:
        want = np.float32(0.999) * old[k] + np.float32(0.001) * ck.params[k]
        np.testing.assert_allclose(ck.ema[k], want, rtol=1e-6, atol=1e-9)


def test_first_step_matches_adamw_by_hand(data):
    c = stage1_config(batch_size=4, warmup_steps=0, grad_clip=0.0)
    ck = new_checkpoint(CFG, c)
    batch = make_batch(data, c, 0)
    leaves = {k: tn.Tensor(v.copy(), requires_grad=True) for k, v in ck.params.items()}
    from ratecascade.seeding import derive_rng
    tn.backward(fm_loss(leaves, CFG, batch, c.noise, derive_rng(c.seed, c.stage, 0, "noise")))
    before = {k: v.copy() for k, v in ck.params.items()}
    train_step(ck, batch, c)
    for k in before:
        g = leaves[k].grad.astype(np.float64)
        m_hat, v_hat = g, g * g  # bias-corrected moments after one step
        upd = m_hat / (np.sqrt(v_hat) + 1e-8)
        want = before[k] - 5e-4 * (upd + 1e-4 * before[k])
        np.testing.assert_allclose(ck.params[k], want, rtol=1e-4, atol=1e-7)


def test_overfit_fixed_batch_monotone(data):
    c = stage1_config(batch_size=8, warmup_steps=0, learning_rate=1e-3)
    ck = new_checkpoint(CFG, c)
    batch = make_batch(data, c, 0)
    losses = [train_step(ck, batch, c, noise_seed=5).loss for _ in range(200)]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.1 * losses[0]


def test_nan_loss_raises(data):
    c = stage1_config(batch_size=2)
    ck = new_checkpoint(CFG, c)
    ck.params["out_proj.b"][:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train_step(ck, make_batch(data, c, 0), c)


def test_stage_mismatch_raises(data):
    ck = new_checkpoint(CFG, stage1_config())
    with pytest.raises(ContractError):
        train_step(ck, make_batch(data, stage2_config(batch_size=2), 0), stage2_config())


def test_stage1_conditions_and_levels(data):
    c = stage1_config(batch_size=8, steps=6)
    record = []
    ck = run_stage1(data, c, CFG, record=record)
    assert ck.stage == SINGLE_RATE and ck.step == 6
    assert len(record) == 48
    assert all(ex.level == 0 and ex.fraction <= 0.15 for ex in record)
    assert all(len(ex.cond) == math.floor(ex.fraction * len(ex.plan)) for ex in record)


def test_stage2_level_histogram_uniform(data):
    c = stage2_config(batch_size=1)
    from ratecascade.seeding import derive_rng
    from ratecascade.training import sample_level

    counts = Counter(sample_level(c, derive_rng(c.seed, c.stage, step, "batch")) for step in range(12_000))
    for lv in (0, 1, 2):
        assert abs(counts[lv] / 12_000 - 1 / 3) < 0.02


def test_stage2_examples(data):
    c = stage2_config(batch_size=16)
    examples = [ex for step in range(40) for ex in make_batch(data, c, step)]
    assert all(ex.plan.satisfies_index_rule() for ex in examples)
    assert all(0 <= ex.plan.t_start <= ex.plan.t_max for ex in examples)
    assert {ex.level for ex in examples} == {0, 1, 2}
    for ex in examples:
        scene = data.scenes[ex.scene_id]
        full = data.frames[ex.scene_id]
        np.testing.assert_array_equal(ex.frames, full[list(ex.positions)])
        assert all(b - a == 1 << ex.level for a, b in zip(ex.positions, ex.positions[1:]))
        for slot, frame in ex.cond.entries.items():
            np.testing.assert_array_equal(frame, ex.frames[slot])
        if ex.condition_mode == "anchors":
            # anchors sit on a coarser grid of the full-rate timeline
            assert ex.level < 2
            strides = {1 << s for s in range(ex.level + 1, 3)}
            assert any(all((ex.positions[j] + 1) % m == 0 for j in ex.cond.positions) for m in strides)
        elif ex.dropped_shots:
            layout = ex.clip_shots
            kept = {layout.shot_of(p) for p in ex.cond.positions}
            assert not kept & set(ex.dropped_shots)
            assert len(kept) < layout.n_shots


def test_anchor_slots():
    # stride-1 clip starting at frame 0: coarser stride-2 grid is every second slot
    assert anchor_slots(8, 0, 1, 1) == [1, 3, 5, 7]
    assert anchor_slots(8, 2, 1, 2) == [1, 5]
    assert anchor_slots(4, 4, 2, 1) == [1, 3]


def test_batches_are_deterministic(data):
    c = stage2_config(batch_size=4)
    a, b = make_batch(data, c, 7), make_batch(data, c, 7)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.frames, y.frames)
        assert x.cond.positions == y.cond.positions and x.plan == y.plan


def test_identical_runs_are_bit_identical(data):
    c = stage1_config(batch_size=4, steps=5)
    a = run_stage1(data, c, CFG)
    b = run_stage1(data, c, CFG)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_resume_matches_uninterrupted_run(data):
    c = stage2_config(batch_size=4, steps=8, warmup_steps=4)
    s1 = run_stage1(data, stage1_config(batch_size=4, steps=3), CFG)
    full = run_stage2(data, c, s1)
    half = run_stage2(data, replace(c, steps=4), s1)
    reloaded = checkpoint_from_bytes(checkpoint_bytes(half))
    resumed = run_stage2(data, c, reloaded)
    assert resumed.stage == MULTI_RATE
    assert checkpoint_bytes(resumed) == checkpoint_bytes(full)


def test_stage2_starts_from_stage1_weights(data):
    s1 = run_stage1(data, stage1_config(batch_size=2, steps=2), CFG)
    s2 = run_stage2(data, stage2_config(batch_size=2, steps=0), s1)
    for k in s1.params:
        np.testing.assert_array_equal(s2.params[k], s1.params[k])
        assert not np.any(s2.adam_m[k])
    assert s2.stage == MULTI_RATE and s2.step == 0


def test_train_log_csv(tmp_path, data):
    log = TrainLog(tmp_path / "log.csv")
    run_stage1(data, stage1_config(batch_size=2, steps=3), CFG, train_log=log)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,stage,loss,lr,grad_norm,levels"
    assert len(lines) == 4 and lines[1].startswith("1,single_rate,")


def test_training_halves_eval_loss(toy_model):
    data = TrainingData(make_scenes(24, 0.0, 3, frame_dim=4))
    c = stage1_config(batch_size=16)
    init = new_checkpoint(toy_model.model_config, c)
    before = eval_loss(init.params, init.model_config, data, c)
    after = eval_loss(toy_model.params, toy_model.model_config, data, c)
    assert after < 0.5 * before
