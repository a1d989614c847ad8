"""Losses, Adam, and the ray-batch training loop.

Stage 1 fits rgb images; stage 2 fine-tunes the same architecture on mask
images rendered as grayscale rgb targets through the identical loss code
path (loss_mask IS loss_rgb, not a reimplementation). The joint variant
trains rgb plus a composited mask head with a BCE term weighted by
joint_weight.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .cameras import camera_rays
from .dataio import Checkpoint
from .field import init_params, FieldParams
from .render import (
    composite_rays,
    composite_rays_backward,
    jitter_offsets,
    sample_segments,
)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    rays_per_batch: int = 1024
    learning_rate: float = 5e-4
    lr_final: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    joint_weight: float = 1.0
    rng_seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        errs = []
        if self.steps < 0:
            errs.append(f"steps must be >= 0, got {self.steps}")
        if self.rays_per_batch < 1:
            errs.append(f"rays_per_batch must be >= 1, got {self.rays_per_batch}")
        if not (self.learning_rate > 0 and 0 < self.lr_final <= self.learning_rate):
            errs.append(
                f"need 0 < lr_final <= learning_rate, got {self.lr_final}, {self.learning_rate}"
            )
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errs.append("adam betas must lie in [0, 1)")
        if self.eps <= 0:
            errs.append("adam eps must be positive")
        if self.joint_weight < 0:
            errs.append(f"joint_weight must be >= 0, got {self.joint_weight}")
        if self.log_every < 1:
            errs.append("log_every must be >= 1")
        if errs:
            raise ValueError("invalid train config: " + "; ".join(errs))


# ---------------------------------------------------------------------------
# Losses

def loss_rgb(rendered, target):
    """Mean over rays of the channel-summed squared error."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {target.shape}")
    return float(np.mean(np.sum((rendered - target) ** 2, axis=-1)))


# Mask fine-tuning reuses the rgb loss verbatim: masks are just images.
loss_mask = loss_rgb

BCE_CLAMP = 1e-7


def bce(pred, target, clamp=BCE_CLAMP):
    """Mean binary cross-entropy with predictions clamped to [clamp, 1-clamp]."""
    pred = np.clip(np.asarray(pred, dtype=np.float64), clamp, 1.0 - clamp)
    target = np.asarray(target, dtype=np.float64)
    return float(np.mean(-(target * np.log(pred) + (1.0 - target) * np.log(1.0 - pred))))


def loss_joint(rendered_rgb, target_rgb, rendered_mask, target_mask, joint_weight):
    """loss_rgb + joint_weight * bce. Reduces to loss_rgb exactly at weight 0."""
    base = loss_rgb(rendered_rgb, target_rgb)
    if joint_weight == 0.0:
        return base
    return base + joint_weight * bce(rendered_mask, target_mask)


def _d_loss_rgb(rendered, target):
    r = rendered.shape[0]
    return 2.0 * (np.asarray(rendered, np.float64) - np.asarray(target, np.float64)) / r


def _d_bce(pred, target, clamp=BCE_CLAMP):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    inside = (pred > clamp) & (pred < 1.0 - clamp)
    p = np.clip(pred, clamp, 1.0 - clamp)
    g = (p - target) / (p * (1.0 - p)) / pred.shape[0]
    return np.where(inside, g, 0.0)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n, dtype=np.float32):
        return cls(m=np.zeros(n, dtype=dtype), v=np.zeros(n, dtype=dtype))


def learning_rate_at(step_index, config):
    """Exponential decay from learning_rate to lr_final across config.steps.

    step_index is 1-based; step config.steps gets exactly lr_final.
    """
    if config.steps <= 0:
        return config.learning_rate
    frac = step_index / config.steps
    return config.learning_rate * (config.lr_final / config.learning_rate) ** frac


def adam_step(params, grads, state, step_index, config):
    """One Adam update. Returns (new_params, state); state is updated in place.

    Raises TrainingError on non-finite gradients, naming the step.
    """
    grads = np.asarray(grads)
    if not np.all(np.isfinite(grads)):
        raise TrainingError(f"non-finite gradient at step {step_index}")
    b1, b2 = config.beta1, config.beta2
    state.m = b1 * state.m + (1.0 - b1) * grads
    state.v = b2 * state.v + (1.0 - b2) * grads * grads
    mhat = state.m / (1.0 - b1**step_index)
    vhat = state.v / (1.0 - b2**step_index)
    lr = learning_rate_at(step_index, config)
    step = lr * mhat / (np.sqrt(vhat) + config.eps)
    return (params - step).astype(params.dtype), state


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainLog:
    """Loss trace. seconds is wall clock and is excluded from determinism
    guarantees; step and loss columns are reproducible bit-for-bit."""

    stage: str
    entries: list = dc_field(default_factory=list)  # (step, loss, seconds)

    def rows(self):
        return [(s, l, sec) for s, l, sec in self.entries]

    def final_loss(self):
        return self.entries[-1][1] if self.entries else None


def _flatten_rays(dataset, as_rgb_target):
    """Precompute per-pixel rays and targets across all frames.

    Returns (origins, dirs, targets (P, 3), frame_ids, pixel_ids).
    Mask images become grayscale rgb targets (level replicated per channel).
    """
    all_o, all_d, all_t, all_f, all_p = [], [], [], [], []
    for fi, (cam, img) in enumerate(dataset.frames):
        intr = cam.intrinsics
        h, w = intr.height, intr.width
        px, py = np.meshgrid(np.arange(w), np.arange(h))
        o, d = camera_rays(cam, px.ravel(), py.ravel())
        all_o.append(o)
        all_d.append(d)
        if as_rgb_target:
            if img.ndim == 2:
                t = np.repeat(img.reshape(-1, 1), 3, axis=1)
            else:
                t = img.reshape(-1, 3)
            all_t.append(t.astype(np.float64))
        else:
            all_t.append(img.reshape(-1).astype(np.float64))
        all_f.append(np.full(h * w, fi, dtype=np.int64))
        all_p.append((py.ravel() * w + px.ravel()).astype(np.int64))
    return (
        np.concatenate(all_o),
        np.concatenate(all_d),
        np.concatenate(all_t),
        np.concatenate(all_f),
        np.concatenate(all_p),
    )


def _check_joint_alignment(rgb_ds, mask_ds):
    if mask_ds.kind != "binary_mask":
        raise ValueError(f"joint training expects a binary_mask dataset, got {mask_ds.kind!r}")
    if len(rgb_ds.frames) != len(mask_ds.frames):
        raise ValueError(
            f"joint datasets must pair frame-by-frame: {len(rgb_ds.frames)} rgb vs "
            f"{len(mask_ds.frames)} mask frames"
        )
    for i, ((ca, _), (cb, _)) in enumerate(zip(rgb_ds.frames, mask_ds.frames)):
        if ca.intrinsics != cb.intrinsics or np.abs(ca.camera_to_world - cb.camera_to_world).max() > 1e-9:
            raise ValueError(f"joint datasets disagree on the camera of frame {i}")


def train(dataset, train_config, field_config, render_config, init=None,
          mask_dataset=None, progress=None):
    """Train or fine-tune a field on a dataset.

    dataset kind picks the mode: rgb alone is stage-1; a mask dataset alone
    is stage-2 (masks rendered as rgb through the identical loss); rgb plus
    mask_dataset is the joint baseline and needs the rgb_sigma_mask head.
    init, when given, must match field_config and the dataset's near/far
    exactly. Returns (Checkpoint, TrainLog). progress, when given, is called
    as progress(step, total_steps, loss, elapsed_seconds) on the logging
    cadence.
    """
    dataset.validate()
    near, far = dataset.near_far()
    joint = mask_dataset is not None

    if joint:
        if dataset.kind != "rgb":
            raise ValueError("joint training needs an rgb dataset plus a mask dataset")
        if field_config.head_type != "rgb_sigma_mask":
            raise ValueError("joint training requires head_type rgb_sigma_mask")
        mask_dataset.validate()
        _check_joint_alignment(dataset, mask_dataset)
        stage = "joint"
    elif dataset.kind == "rgb":
        stage = "stage1_rgb"
    else:
        stage = "stage2_mask"

    if init is not None:
        if init.config != field_config:
            raise ValueError(
                f"init checkpoint architecture {init.config} does not match {field_config}"
            )
        if (init.near, init.far) != (near, far):
            raise ValueError(
                f"init checkpoint near/far ({init.near}, {init.far}) does not match "
                f"dataset near/far ({near}, {far}); stages must share ray ranges"
            )
        values = init.params.copy()
    else:
        values = init_params(field_config, train_config.rng_seed).values

    params = FieldParams(values, field_config)
    n_samples = render_config.samples_per_ray
    bg = np.zeros(3) if dataset.kind != "rgb" else np.asarray(render_config.background_color)

    origins, dirs, targets, frame_ids, pixel_ids = _flatten_rays(dataset, as_rgb_target=True)
    mask_targets = None
    if joint:
        _, _, mask_targets, _, _ = _flatten_rays(mask_dataset, as_rgb_target=False)

    log = TrainLog(stage=stage)
    state = AdamState.zeros(params.values.size)
    rng = np.random.default_rng(train_config.rng_seed)
    n_rays_total = origins.shape[0]
    r = train_config.rays_per_batch
    t0 = time.perf_counter()

    for step in range(1, train_config.steps + 1):
        idx = rng.integers(0, n_rays_total, size=r)
        o = origins[idx]
        d = dirs[idx]
        offsets = None
        if render_config.jitter:
            offsets = jitter_offsets(
                train_config.rng_seed, frame_ids[idx], pixel_ids[idx], step, n_samples
            )
        t, delta = sample_segments(np.full(r, near), np.full(r, far), n_samples, offsets)
        res = composite_rays(
            params, o, d, t, delta, bg, want_mask=joint, with_cache=True
        )
        tgt = targets[idx]
        if joint:
            mtgt = mask_targets[idx]
            loss = loss_joint(res["color"], tgt, res["mask"], mtgt, train_config.joint_weight)
            d_color = _d_loss_rgb(res["color"], tgt)
            d_mask = train_config.joint_weight * _d_bce(res["mask"], mtgt)
            grads = composite_rays_backward(params, res, d_color, d_mask)
        else:
            loss = loss_rgb(res["color"], tgt)
            d_color = _d_loss_rgb(res["color"], tgt)
            grads = composite_rays_backward(params, res, d_color)
        new_values, state = adam_step(params.values, grads, state, step, train_config)
        params = FieldParams(new_values, field_config)

        if step % train_config.log_every == 0 or step == train_config.steps:
            elapsed = time.perf_counter() - t0
            log.entries.append((step, loss, elapsed))
            if progress is not None:
                progress(step, train_config.steps, loss, elapsed)

    ckpt = Checkpoint(
        config=field_config,
        params=params.values.astype(np.float32),
        stage=stage,
        near=near,
        far=far,
    )
    return ckpt, log


def write_train_log(log, path):
    from .dataio import write_csv

    write_csv(path, ("step", "loss", "seconds"), log.rows())
