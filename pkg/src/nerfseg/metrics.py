"""Evaluation: PSNR, IoU, held-out view scoring, and density-delta analysis.

The density-delta analysis compares the field before and after mask
fine-tuning along rays chosen from ground-truth masks: object rays should
show increased density where the fruit is, background rays should show
suppression or noise around zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .cameras import camera_rays
from .field import FieldParams
from .render import RenderConfig, query_density, render_view, sample_segments

PSNR_CAP_DB = 99.0


def psnr(a, b):
    """10*log10(1/MSE) with MAX=1, capped at 99 dB (identical images)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr dimension mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _binarize(pred, threshold):
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim == 3:
        pred = pred.mean(axis=-1)
    return pred >= threshold


def iou(pred, gt, threshold=0.5):
    """Intersection over union of the binarized prediction against a binary
    ground truth. Multichannel predictions are reduced by the channel mean
    before thresholding. Empty against empty is defined as 1."""
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim == 3:
        gt = gt.mean(axis=-1)
    p = _binarize(pred, threshold)
    if p.shape != gt.shape:
        raise ValueError(f"iou dimension mismatch: {p.shape} vs {gt.shape}")
    if not np.isin(gt, (0.0, 1.0)).all():
        raise ValueError("iou ground truth must be binary")
    g = gt == 1.0
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def snap_image_to_levels(img, class_levels):
    """Snap each pixel to the nearest of {0} union class_levels (ties to the
    smaller level). Returns the level-valued image."""
    levels = np.concatenate([[0.0], np.asarray(class_levels, dtype=np.float64)])
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    idx = np.argmin(np.abs(img[..., None] - levels), axis=-1)
    return levels[idx]


def multiclass_iou(pred, gt, class_levels):
    """One-vs-rest IoU per class level. pred/gt are level-valued images
    (pred is snapped first). Returns {level: iou}."""
    snapped = snap_image_to_levels(pred, class_levels)
    gt = np.asarray(gt, dtype=np.float64)
    out = {}
    for level in class_levels:
        out[float(level)] = iou(
            (snapped == float(level)).astype(np.float64),
            (gt == np.float64(np.float32(level))).astype(np.float64),
        )
    return out


# ---------------------------------------------------------------------------
# Held-out view evaluation

@dataclass
class EvalReport:
    """Rows of (view_id, metric, value) plus optional attachments."""

    rows: list = dc_field(default_factory=list)
    count_report: object = None
    delta_summary: dict = None


def render_eval_views(checkpoint, dataset, held_out, render_config=None):
    """Score held-out views of a dataset under a checkpoint.

    stage-1 on rgb -> per-view PSNR. stage-2 on masks -> IoU of the
    binarized render (multiclass adds per-level one-vs-rest rows). joint ->
    PSNR on rgb or mask-head IoU on binary masks. Any other pairing is an
    error. Mask renders composite over a black background to match how the
    mask stages train. Returns (images dict, EvalReport rows).
    """
    dataset.validate()
    near, far = dataset.near_far()
    if (near, far) != (checkpoint.near, checkpoint.far):
        raise ValueError(
            f"dataset near/far ({near}, {far}) does not match checkpoint "
            f"({checkpoint.near}, {checkpoint.far})"
        )
    n_frames = len(dataset.frames)
    held_out = list(held_out)
    for v in held_out:
        if not (0 <= v < n_frames):
            raise ValueError(f"held-out index {v} outside [0, {n_frames})")
    if render_config is None:
        render_config = RenderConfig(jitter=False)

    stage = checkpoint.stage
    kind = dataset.kind
    ok = (
        (stage == "stage1_rgb" and kind == "rgb")
        or (stage == "stage2_mask" and kind in ("binary_mask", "multiclass_mask"))
        or (stage == "joint" and kind in ("rgb", "binary_mask"))
    )
    if not ok:
        raise ValueError(f"checkpoint stage {stage!r} cannot be scored on a {kind!r} dataset")

    params = FieldParams(checkpoint.params, checkpoint.config)
    mask_bg = RenderConfig(
        samples_per_ray=render_config.samples_per_ray,
        jitter=False,
        background_color=(0.0, 0.0, 0.0),
    )
    images = {}
    rows = []
    for v in held_out:
        cam, gt = dataset.frames[v]
        if stage == "stage1_rgb" or (stage == "joint" and kind == "rgb"):
            img, _ = render_view(params, cam, render_config)
            images[v] = img
            rows.append((v, "psnr", psnr(np.clip(img, 0.0, 1.0), gt)))
        elif stage == "joint":
            _, mask = render_view(params, cam, mask_bg, want_mask=True)
            images[v] = mask
            rows.append((v, "iou", iou(mask, gt)))
        else:
            img, _ = render_view(params, cam, mask_bg)
            images[v] = img
            if kind == "binary_mask":
                rows.append((v, "iou", iou(img, gt)))
            else:
                per_level = multiclass_iou(img, gt, dataset.class_levels)
                for k, level in enumerate(dataset.class_levels, start=1):
                    rows.append((v, f"iou_level_{k}", per_level[float(level)]))
                rows.append((v, "iou_macro", float(np.mean(list(per_level.values())))))
    return images, rows


# ---------------------------------------------------------------------------
# Density delta

@dataclass
class DensityDeltaProfile:
    frame: int
    px: int
    py: int
    category: str  # "object" | "background"
    t: np.ndarray
    delta: np.ndarray


def density_delta(pre, post, mask_dataset, n_rays_per_category=64,
                  samples_per_ray=64, seed=0):
    """Per-ray density change profiles between two checkpoints.

    pre must be the stage-1 field and post its stage-2 fine-tune with the
    identical architecture and ray range. Rays are drawn (seeded, without
    replacement) from the ground-truth masks: "object" rays hit mask
    foreground, "background" rays hit mask zero. Both fields are evaluated
    at the same midpoint samples t_i; delta_i = sigma_post - sigma_pre.
    Returns (profiles, {"object": mean, "background": mean}).
    """
    if pre.stage != "stage1_rgb":
        raise ValueError(f"density_delta pre checkpoint must be stage1_rgb, got {pre.stage!r}")
    if post.stage != "stage2_mask":
        raise ValueError(f"density_delta post checkpoint must be stage2_mask, got {post.stage!r}")
    if pre.config != post.config:
        raise ValueError(
            f"architecture mismatch between checkpoints: {pre.config} vs {post.config}"
        )
    if (pre.near, pre.far) != (post.near, post.far):
        raise ValueError(
            f"checkpoints disagree on near/far: ({pre.near}, {pre.far}) vs "
            f"({post.near}, {post.far})"
        )
    mask_dataset.validate()
    if mask_dataset.kind == "rgb":
        raise ValueError("density_delta needs a mask dataset, got rgb")
    near, far = mask_dataset.near_far()
    if (near, far) != (pre.near, pre.far):
        raise ValueError(
            f"mask dataset near/far ({near}, {far}) does not match checkpoints "
            f"({pre.near}, {pre.far})"
        )

    obj, bg = [], []
    for fi, (_, img) in enumerate(mask_dataset.frames):
        ys, xs = np.nonzero(img > 0)
        obj.extend((fi, int(x), int(y)) for x, y in zip(xs, ys))
        ys, xs = np.nonzero(img == 0)
        bg.extend((fi, int(x), int(y)) for x, y in zip(xs, ys))

    rng = np.random.default_rng(seed)
    chosen = []
    for category, pool in (("object", obj), ("background", bg)):
        take = min(n_rays_per_category, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False) if take else []
        chosen.extend((category,) + pool[int(i)] for i in idx)

    if not chosen:
        return [], {"object": 0.0, "background": 0.0}

    origins = []
    dirs = []
    for _, fi, x, y in chosen:
        cam = mask_dataset.frames[fi][0]
        o, d = camera_rays(cam, np.array([x]), np.array([y]))
        origins.append(o[0])
        dirs.append(d[0])
    origins = np.stack(origins)
    dirs = np.stack(dirs)
    r = origins.shape[0]
    t, _ = sample_segments(np.full(r, near), np.full(r, far), samples_per_ray)
    pts = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
    sig_pre = query_density(FieldParams(pre.params, pre.config), pts).reshape(r, samples_per_ray)
    sig_post = query_density(FieldParams(post.params, post.config), pts).reshape(r, samples_per_ray)
    delta = sig_post - sig_pre

    profiles = []
    sums = {"object": [], "background": []}
    for i, (category, fi, x, y) in enumerate(chosen):
        profiles.append(
            DensityDeltaProfile(frame=fi, px=x, py=y, category=category, t=t[i], delta=delta[i])
        )
        sums[category].append(delta[i])
    summary = {
        k: float(np.mean(np.concatenate(v))) if v else 0.0 for k, v in sums.items()
    }
    return profiles, summary


def write_density_delta_csv(profiles, path):
    from .dataio import write_csv

    rows = []
    for p in profiles:
        for si in range(p.t.shape[0]):
            rows.append((p.frame, p.px, p.py, p.category, si, p.t[si], p.delta[si]))
    write_csv(
        path,
        ("frame", "px", "py", "category", "sample_index", "t", "delta_sigma"),
        rows,
    )


def write_eval_report_csv(rows, path):
    from .dataio import write_csv

    write_csv(path, ("view_id", "metric", "value"), rows)


# ---------------------------------------------------------------------------
# Cloud-vs-geometry precision (baseline comparison)

def voxel_precision(points, scene, leaf, origin=(-1.0, -1.0, -1.0)):
    """Fraction of occupied voxels whose center lies inside some fruit.

    Both clouds under comparison are voxelized onto the same grid so the
    two methods' differing point densities cancel out. Empty clouds score 0.
    """
    from .scene import fruit_occupancy

    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return 0.0
    keys = np.unique(
        np.floor((points - np.asarray(origin)) / leaf).astype(np.int64), axis=0
    )
    centers = np.asarray(origin) + (keys.astype(np.float64) + 0.5) * leaf
    return float(np.mean(fruit_occupancy(scene, centers) > 0))
