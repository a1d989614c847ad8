"""Losses, Adam, and the shared train() loop for all three stages."""

import numpy as np
import pytest

from conftest import ring_cameras, sphere_datasets, tiny_field_config
from nerfseg.dataio import Checkpoint, Dataset
from nerfseg.field import init_params, param_count
from nerfseg.render import RenderConfig
from nerfseg.training import (
    AdamState,
    TrainConfig,
    TrainingError,
    adam_step,
    bce,
    learning_rate_at,
    loss_joint,
    loss_mask,
    loss_rgb,
    train,
)


def test_loss_rgb_closed_forms():
    a = np.zeros((10, 3))
    assert loss_rgb(a, a) == 0.0
    assert abs(loss_rgb(a + 0.1, a) - 0.03) < 1e-15
    assert loss_rgb(np.full((4, 3), 0.5), np.ones((4, 3))) == 0.75


def test_loss_rgb_permutation_invariant():
    rng = np.random.default_rng(0)
    r = rng.uniform(0, 1, size=(50, 3))
    t = rng.uniform(0, 1, size=(50, 3))
    perm = rng.permutation(50)
    assert abs(loss_rgb(r, t) - loss_rgb(r[perm], t[perm])) < 1e-15


def test_loss_rgb_shape_check():
    with pytest.raises(ValueError, match="shape mismatch"):
        loss_rgb(np.zeros((3, 3)), np.zeros((4, 3)))


def test_mask_loss_is_the_rgb_loss():
    # the whole point of the fine-tuning stage: no new objective
    assert loss_mask is loss_rgb


def test_bce_closed_forms():
    assert abs(bce(np.full(8, 0.5), np.ones(8)) - np.log(2.0)) < 1e-12
    assert bce(np.ones(4), np.ones(4)) < 1e-5
    assert bce(np.full(4, 1e-12), np.zeros(4)) < 1e-5  # clamp kicks in


def test_joint_loss_weight_zero_is_rgb_loss():
    rng = np.random.default_rng(1)
    r = rng.uniform(0, 1, size=(20, 3))
    t = rng.uniform(0, 1, size=(20, 3))
    m = rng.uniform(0, 1, size=20)
    gt = (m > 0.5).astype(np.float64)
    assert loss_joint(r, t, m, gt, 0.0) == loss_rgb(r, t)
    assert loss_joint(r, t, m, gt, 2.0) == loss_rgb(r, t) + 2.0 * bce(m, gt)


def test_learning_rate_schedule():
    cfg = TrainConfig(steps=100, learning_rate=1e-3, lr_final=1e-5)
    assert abs(learning_rate_at(1, cfg) - 1e-3 * (1e-2) ** 0.01) < 1e-18
    assert abs(learning_rate_at(100, cfg) - 1e-5) < 1e-20
    mid = learning_rate_at(50, cfg)
    assert abs(mid - 1e-4) < 1e-12  # geometric midpoint


def test_adam_single_step_closed_form():
    cfg = TrainConfig(steps=10, learning_rate=0.01, lr_final=0.01)
    params = np.zeros(1)
    state = AdamState.zeros(1, dtype=np.float64)
    g = np.ones(1)
    out, state = adam_step(params, g, state, 1, cfg)
    # bias-corrected mhat = vhat = 1 at t=1
    expect = -0.01 * 1.0 / (1.0 + cfg.eps)
    assert abs(float(out[0]) - expect) < 1e-15
    assert abs(state.m[0] - 0.1) < 1e-15
    assert abs(state.v[0] - 0.001) < 1e-15


def test_adam_zero_gradient_from_rest_leaves_params():
    cfg = TrainConfig(steps=10, learning_rate=0.01, lr_final=0.01)
    params = np.full(3, 2.5)
    state = AdamState.zeros(3, dtype=np.float64)
    out, state = adam_step(params, np.zeros(3), state, 1, cfg)
    assert np.array_equal(out, params)
    assert np.all(state.m == 0.0)
    assert np.all(state.v == 0.0)


def test_adam_moments_decay_after_gradient_stops():
    cfg = TrainConfig(steps=10, learning_rate=0.01, lr_final=0.01)
    params = np.zeros(2)
    state = AdamState.zeros(2, dtype=np.float64)
    params, state = adam_step(params, np.ones(2), state, 1, cfg)
    m1 = state.m.copy()
    params, state = adam_step(params, np.zeros(2), state, 2, cfg)
    assert np.allclose(state.m, 0.9 * m1)


def test_adam_rejects_nonfinite_gradients():
    cfg = TrainConfig(steps=10)
    state = AdamState.zeros(2, dtype=np.float64)
    with pytest.raises(TrainingError, match="step 3"):
        adam_step(np.zeros(2), np.array([1.0, np.nan]), state, 3, cfg)


# ---------------------------------------------------------------------------
# train() end to end, tiny scale

RC = RenderConfig(samples_per_ray=24, jitter=True, background_color=0.5)


def quick(steps, **kw):
    base = dict(rays_per_batch=96, log_every=25)
    base.update(kw)
    return TrainConfig(steps=steps, **base)


def test_stage1_loss_decreases():
    _, _, rgb, _ = sphere_datasets(n_views=3, res=12)
    ck, log = train(rgb, quick(75), tiny_field_config(), RC)
    assert ck.stage == "stage1_rgb"
    assert ck.near == 0.5 and ck.far == 4.0
    losses = [l for _, l, _ in log.rows()]
    assert losses[-1] < losses[0]
    assert log.rows()[-1][0] == 75


def test_training_bit_reproducible():
    _, _, rgb, _ = sphere_datasets(n_views=2, res=10)
    fc = tiny_field_config()
    ck_a, log_a = train(rgb, quick(30), fc, RC)
    ck_b, log_b = train(rgb, quick(30), fc, RC)
    assert np.array_equal(ck_a.params, ck_b.params)
    assert [(s, l) for s, l, _ in log_a.rows()] == [(s, l) for s, l, _ in log_b.rows()]


def test_training_seed_changes_result():
    _, _, rgb, _ = sphere_datasets(n_views=2, res=10)
    fc = tiny_field_config()
    ck_a, _ = train(rgb, quick(20), fc, RC)
    ck_b, _ = train(rgb, quick(20, rng_seed=1), fc, RC)
    assert not np.array_equal(ck_a.params, ck_b.params)


def test_zero_steps_returns_init():
    _, _, rgb, _ = sphere_datasets(n_views=2, res=10)
    fc = tiny_field_config()
    ck, log = train(rgb, quick(0), fc, RC)
    assert np.array_equal(ck.params, init_params(fc, 0).values)
    assert log.rows() == []


def test_stage2_runs_through_identical_code_path():
    _, _, rgb, mask = sphere_datasets(n_views=3, res=12)
    fc = tiny_field_config()
    ck1, _ = train(rgb, quick(40), fc, RC)
    ck2, log2 = train(mask, quick(30), fc, RC, init=ck1)
    assert ck2.stage == "stage2_mask"
    assert ck2.params.shape == ck1.params.shape
    losses = [l for _, l, _ in log2.rows()]
    assert losses[-1] < losses[0]


def test_finetune_on_rgb_continues_stage1():
    # feeding an rgb dataset through the fine-tuning entry is exactly more
    # stage-1 training: same code path, stage tag follows the data kind
    _, _, rgb, _ = sphere_datasets(n_views=2, res=10)
    fc = tiny_field_config()
    ck1, _ = train(rgb, quick(20), fc, RC)
    cont_a, log_a = train(rgb, quick(10), fc, RC, init=ck1)
    cont_b, log_b = train(rgb, quick(10), fc, RC, init=ck1)
    assert cont_a.stage == "stage1_rgb"
    assert np.array_equal(cont_a.params, cont_b.params)
    assert log_a.rows()[0][1] == log_b.rows()[0][1]


def test_init_arch_mismatch_rejected():
    _, _, rgb, _ = sphere_datasets(n_views=2, res=10)
    small = tiny_field_config(width=8)
    big = tiny_field_config(width=16)
    ck, _ = train(rgb, quick(1), small, RC)
    with pytest.raises(ValueError, match="does not match"):
        train(rgb, quick(1), big, RC, init=ck)


def test_init_near_far_mismatch_rejected():
    scene, cams, rgb, _ = sphere_datasets(n_views=2, res=10)
    fc = tiny_field_config()
    ck, _ = train(rgb, quick(1), fc, RC)
    other = Dataset(
        "rgb",
        [(c, i) for c, i in zip(ring_cameras(2, res=10, near=0.4), [f[1] for f in rgb.frames])],
    )
    with pytest.raises(ValueError, match="near/far"):
        train(other, quick(1), fc, RC, init=ck)


def test_joint_training_needs_mask_head():
    _, _, rgb, mask = sphere_datasets(n_views=2, res=10)
    with pytest.raises(ValueError, match="rgb_sigma_mask"):
        train(rgb, quick(1), tiny_field_config(), RC, mask_dataset=mask)


def test_joint_training_camera_alignment_enforced():
    _, _, rgb, mask = sphere_datasets(n_views=3, res=10)
    fc = tiny_field_config(head_type="rgb_sigma_mask")
    shuffled = Dataset("binary_mask", mask.frames[::-1], class_levels=[1.0])
    with pytest.raises(ValueError, match="frame 0"):
        train(rgb, quick(1), fc, RC, mask_dataset=shuffled)
    dropped = Dataset("binary_mask", mask.frames[:-1], class_levels=[1.0])
    with pytest.raises(ValueError, match="frame-by-frame"):
        train(rgb, quick(1), fc, RC, mask_dataset=dropped)


def test_joint_training_runs_and_tags_stage():
    _, _, rgb, mask = sphere_datasets(n_views=2, res=10)
    fc = tiny_field_config(head_type="rgb_sigma_mask")
    ck, log = train(rgb, quick(25), fc, RC, mask_dataset=mask)
    assert ck.stage == "joint"
    assert len(log.rows()) >= 1
    assert all(np.isfinite(l) for _, l, _ in log.rows())


def test_joint_weight_zero_matches_pure_rgb_loss_path():
    # with joint_weight 0 the mask term vanishes from the objective; the
    # optimizer still updates mask-head params only through the trunk
    _, _, rgb, mask = sphere_datasets(n_views=2, res=10)
    fc = tiny_field_config(head_type="rgb_sigma_mask")
    ck_j, log_j = train(rgb, quick(12, joint_weight=0.0), fc, RC, mask_dataset=mask)
    ck_r, log_r = train(rgb, quick(12, joint_weight=0.0), fc, RC, mask_dataset=mask)
    assert np.array_equal(ck_j.params, ck_r.params)
    assert log_j.rows()[0][1] == log_r.rows()[0][1]


def test_progress_callback_cadence():
    _, _, rgb, _ = sphere_datasets(n_views=2, res=10)
    calls = []
    train(
        rgb,
        quick(50, log_every=20),
        tiny_field_config(),
        RC,
        progress=lambda s, n, l, e: calls.append((s, n)),
    )
    assert [s for s, _ in calls] == [20, 40, 50]
    assert all(n == 50 for _, n in calls)


def test_train_config_validation():
    with pytest.raises(ValueError, match="steps"):
        TrainConfig(steps=-1)
    with pytest.raises(ValueError, match="lr_final"):
        TrainConfig(learning_rate=1e-4, lr_final=1e-3)
    with pytest.raises(ValueError, match="joint_weight"):
        TrainConfig(joint_weight=-0.5)
