"""Point cloud extraction from trained fields.

Two routes produce fruit point clouds:

* extract_grid: threshold the fine-tuned segmentation field's density on a
  regular grid. The mask fine-tune drives non-fruit density toward zero, so
  surviving cells are fruit volume.
* sa3d_backproject: the no-finetune baseline. March the foreground-mask
  rays through the frozen stage-1 rgb field and keep sample points whose
  raw density clears a threshold, then dedupe into voxels. Every output
  point lies on some foreground ray of the input masks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .cameras import camera_rays
from .dataio import LabeledPointCloud
from .field import FieldParams
from .render import query_density, sample_segments


@dataclass(frozen=True)
class ExtractConfig:
    bounds_min: tuple = (-1.0, -1.0, -1.0)
    bounds_max: tuple = (1.0, 1.0, 1.0)
    grid_resolution: int = 160
    density_threshold: float = 5.0
    sa3d_sigma_threshold: float = 5.0
    voxel_dedupe_leaf: float = 0.02

    def __post_init__(self):
        lo = np.asarray(self.bounds_min, dtype=np.float64)
        hi = np.asarray(self.bounds_max, dtype=np.float64)
        errs = []
        if lo.shape != (3,) or hi.shape != (3,):
            errs.append("bounds must be 3-vectors")
        elif np.any(hi <= lo):
            errs.append(f"bounds_max {tuple(hi)} must exceed bounds_min {tuple(lo)} per axis")
        if self.grid_resolution < 1:
            errs.append(f"grid_resolution must be >= 1, got {self.grid_resolution}")
        if self.density_threshold <= 0 or self.sa3d_sigma_threshold <= 0:
            errs.append("density thresholds must be positive")
        if self.voxel_dedupe_leaf <= 0:
            errs.append("voxel_dedupe_leaf must be positive")
        if errs:
            raise ValueError("invalid extract config: " + "; ".join(errs))
        object.__setattr__(self, "bounds_min", tuple(float(v) for v in lo))
        object.__setattr__(self, "bounds_max", tuple(float(v) for v in hi))


def grid_centers(config):
    """Cell centers of the extraction grid, shape (res^3, 3), x-major order."""
    lo = np.asarray(config.bounds_min)
    hi = np.asarray(config.bounds_max)
    res = config.grid_resolution
    axes = [lo[a] + (hi[a] - lo[a]) * (np.arange(res) + 0.5) / res for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)


def _params(ckpt):
    return FieldParams(ckpt.params, ckpt.config)


def grid_threshold_cloud(density_fn, config, source="invnerf"):
    """Apply the grid-threshold rule to any density function.

    density_fn maps (N, 3) points to (N,) densities. Kept cells are grid
    centers with density strictly above density_threshold, in grid order.
    """
    pts = grid_centers(config)
    sigma = np.asarray(density_fn(pts), dtype=np.float64).reshape(-1)
    keep = sigma > config.density_threshold
    kept = pts[keep].astype(np.float32)
    if kept.shape[0] == 0:
        warnings.warn(
            "grid extraction found no cells above the density threshold "
            f"({config.density_threshold}); returning an empty cloud"
        )
    n = kept.shape[0]
    level = np.clip(np.round(255 * (1 - np.exp(-sigma[keep] / 50.0))), 0, 255).astype(np.uint8)
    colors = np.stack([level, level, level], axis=-1) if n else np.zeros((0, 3), np.uint8)
    return LabeledPointCloud(
        points=kept,
        colors=colors,
        labels=np.zeros(n, dtype=np.int64),
        cluster_ids=np.full(n, -1, dtype=np.int64),
        source=source,
    )


def extract_grid(checkpoint, config):
    """Cells of the extraction grid where the fine-tuned density exceeds the
    threshold, as an unlabeled cloud (source "invnerf").

    Requires a stage-2 checkpoint: stage-1 density encodes all geometry, not
    the segmentation, so thresholding it would return the whole tree.
    """
    if checkpoint.stage != "stage2_mask":
        raise ValueError(
            f"extract_grid needs a stage2_mask checkpoint, got {checkpoint.stage!r}; "
            "fine-tune on masks first"
        )
    params = _params(checkpoint)
    return grid_threshold_cloud(lambda p: query_density(params, p), config)


def voxel_dedupe(points, leaf, origin=(0.0, 0.0, 0.0)):
    """Keep the first point (in input order) per occupied voxel.

    Output is ordered by lexicographically sorted voxel key, so the result
    is independent of any later reordering of duplicate points. Returns
    (kept_points, kept_indices).
    """
    points = np.asarray(points)
    if points.shape[0] == 0:
        return points.copy(), np.zeros(0, dtype=np.int64)
    keys = np.floor((points.astype(np.float64) - np.asarray(origin)) / leaf).astype(np.int64)
    # Stable lexsort: primary x, then y, then z, input order last for tie-break.
    order = np.lexsort((np.arange(points.shape[0]), keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    kept = order[first]
    return points[kept].copy(), kept


def backproject_masks(density_fn, mask_dataset, config, render_config):
    """Back-projection rule over any density function; see sa3d_backproject.

    Returns the deduped sample points (M, 3) float64.
    """
    mask_dataset.validate()
    near, far = mask_dataset.near_far()
    n = render_config.samples_per_ray
    collected = []
    for cam, img in mask_dataset.frames:
        ys, xs = np.nonzero(img > 0)
        if ys.size == 0:
            continue
        o, d = camera_rays(cam, xs, ys)  # row-major pixel order from nonzero
        t, _ = sample_segments(np.full(ys.size, near), np.full(ys.size, far), n)
        pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
        sigma = np.asarray(density_fn(pts), dtype=np.float64).reshape(-1)
        collected.append(pts[sigma > config.sa3d_sigma_threshold])
    if collected:
        raw = np.concatenate(collected)
    else:
        raw = np.zeros((0, 3))
    deduped, _ = voxel_dedupe(raw, config.voxel_dedupe_leaf, origin=config.bounds_min)
    return deduped


def sa3d_backproject(checkpoint, mask_dataset, config, render_config):
    """Back-project foreground mask pixels through a frozen stage-1 field.

    For every mask pixel with value > 0, march its ray with deterministic
    midpoint samples and keep sample positions whose raw density exceeds
    sa3d_sigma_threshold, then voxel-dedupe with voxel_dedupe_leaf (first
    sample in (frame, pixel, sample) order represents each voxel, so every
    output point still lies on a foreground ray). The field is never
    updated. Returns a cloud with source "sa3d".
    """
    if checkpoint.stage != "stage1_rgb":
        raise ValueError(
            f"sa3d_backproject needs a stage1_rgb checkpoint, got {checkpoint.stage!r}"
        )
    if mask_dataset.kind != "binary_mask":
        raise ValueError(f"sa3d_backproject needs a binary_mask dataset, got {mask_dataset.kind!r}")
    near, far = mask_dataset.near_far()
    if (near, far) != (checkpoint.near, checkpoint.far):
        raise ValueError(
            f"mask dataset near/far ({near}, {far}) does not match checkpoint "
            f"({checkpoint.near}, {checkpoint.far})"
        )
    params = _params(checkpoint)
    deduped = backproject_masks(
        lambda p: query_density(params, p), mask_dataset, config, render_config
    )
    if deduped.shape[0] == 0:
        warnings.warn("sa3d_backproject kept no samples; returning an empty cloud")
    m = deduped.shape[0]
    return LabeledPointCloud(
        points=deduped.astype(np.float32),
        colors=np.tile(np.array([[230, 80, 60]], dtype=np.uint8), (m, 1)),
        labels=np.zeros(m, dtype=np.int64),
        cluster_ids=np.full(m, -1, dtype=np.int64),
        source="sa3d",
    )


def canonical_view_direction(cameras, centroid):
    """Unit vector from the scene centroid toward the mean camera position.

    Used as the fixed query direction when reading colors out of a field at
    arbitrary points (the color head wants some direction; this one is
    representative of how the training rays saw the scene)."""
    positions = np.stack([c.origin for c in cameras])
    v = positions.mean(axis=0) - np.asarray(centroid, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise ValueError("mean camera position coincides with the scene centroid")
    return v / norm


def snap_to_levels(values, class_levels):
    """Snap scalars to the nearest of {0} union class_levels.

    Returns integer labels: 0 for the background level, k for
    class_levels[k-1]. Ties resolve to the smaller label.
    """
    levels = np.concatenate([[0.0], np.asarray(class_levels, dtype=np.float64)])
    dist = np.abs(np.asarray(values, dtype=np.float64)[:, None] - levels[None, :])
    return np.argmin(dist, axis=1).astype(np.int64)


def classify_multiclass(checkpoint, points, class_levels, direction):
    """Per-point fruit class labels from a multiclass fine-tuned field.

    Reads the field color at each point along the fixed direction, takes the
    channel mean, and snaps it to the nearest declared intensity level.
    Label 0 means the point reads as background."""
    if checkpoint.stage != "stage2_mask":
        raise ValueError(
            f"classify_multiclass needs a stage2_mask checkpoint, got {checkpoint.stage!r}"
        )
    from .field import field_forward

    params = _params(checkpoint)
    points = np.asarray(points, dtype=params.values.dtype).reshape(-1, 3)
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    out = field_forward(params, points, np.broadcast_to(direction, points.shape).copy())
    value = out.color.mean(axis=-1)
    return snap_to_levels(value, class_levels)


def multiclass_cloud(checkpoint, cloud, class_levels, direction):
    """Label a cloud's points by class and drop the ones that read as
    background. Colors become the snapped gray levels."""
    labels = classify_multiclass(checkpoint, cloud.points, class_levels, direction)
    keep = labels > 0
    levels = np.concatenate([[0.0], np.asarray(class_levels, dtype=np.float64)])
    gray = np.round(levels[labels[keep]] * 255).astype(np.uint8)
    return cloud.replace(
        points=cloud.points[keep],
        colors=np.stack([gray, gray, gray], axis=-1),
        labels=labels[keep],
        cluster_ids=np.full(int(keep.sum()), -1, dtype=np.int64),
    )
