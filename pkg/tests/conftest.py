"""Shared fixtures and oracle helpers for the test suite."""

import numpy as np
import pytest

from nerfseg.cameras import make_ring_poses, symmetric_intrinsics
from nerfseg.dataio import Dataset
from nerfseg.field import FieldConfig
from nerfseg.render import RenderConfig
from nerfseg.scene import OrchardSpec, Scene, Sphere, ray_trace_view
from nerfseg.training import TrainConfig, train


def tiny_field_config(head_type="rgb_sigma", width=8, depth=2):
    return FieldConfig(
        pos_frequencies=2,
        dir_frequencies=1,
        trunk_depth=depth,
        trunk_width=width,
        head_type=head_type,
    )


def fd_gradient(f, x, h=1e-3):
    """Central finite differences of scalar f at x, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(analytic, reference, floor=1e-8):
    """max_i |a_i - r_i| / max(floor, |r_i|)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    r = np.asarray(reference, dtype=np.float64).ravel()
    return float(np.max(np.abs(a - r) / np.maximum(floor, np.abs(r))))


def one_sphere_scene(radius=0.3, albedo=(0.85, 0.2, 0.15), background=0.5):
    """A single centered fruit sphere, no trunk or canopy occluders."""
    spec = OrchardSpec(
        fruit_count=1,
        fruit_radius=radius,
        canopy_center=(0.0, 0.0, 0.0),
        canopy_radius=max(0.65, 2.05 * radius),
        background_albedo=background,
    )
    sphere = Sphere(
        center=np.zeros(3),
        radius=radius,
        albedo=np.asarray(albedo, dtype=np.float64),
        class_id=1,
    )
    return Scene(spec=spec, primitives=(sphere,))


def ring_cameras(n_views, res=16, focal=None, radius=1.6, height=0.5,
                 lookat=(0.0, 0.0, 0.0), near=0.5, far=4.0):
    if focal is None:
        focal = res * 70.0 / 64.0  # same field of view at any resolution
    intr = symmetric_intrinsics(focal, res, res, near, far)
    return make_ring_poses(n_views, radius, height, lookat, intr)


def sphere_datasets(n_views=4, res=16):
    """Paired rgb and binary mask datasets of the one-sphere scene."""
    scene = one_sphere_scene()
    cams = ring_cameras(n_views, res=res)
    rgb = Dataset("rgb", [(c, ray_trace_view(scene, c, "rgb")) for c in cams])
    mask = Dataset(
        "binary_mask",
        [(c, ray_trace_view(scene, c, "mask", target_classes={1})) for c in cams],
        class_levels=[1.0],
    )
    return scene, cams, rgb, mask


@pytest.fixture(scope="session")
def mini():
    """Quickly trained stage-1 and stage-2 checkpoints on the one-sphere scene.

    Deliberately small: width-16 trunk, 16x16 frames, a few hundred steps.
    Enough signal for qualitative assertions (trained beats untrained, object
    density rises after fine-tuning) without slowing the suite down.
    """
    scene, cams, rgb, mask = sphere_datasets(n_views=5, res=16)
    fc = tiny_field_config(width=16)
    rc = RenderConfig(samples_per_ray=32, jitter=True, background_color=0.5)
    ck1, log1 = train(
        rgb, TrainConfig(steps=500, rays_per_batch=192, log_every=100), fc, rc
    )
    ck2, log2 = train(
        mask,
        TrainConfig(steps=600, rays_per_batch=192, learning_rate=1.5e-3,
                    lr_final=2e-4, log_every=100),
        fc,
        rc,
        init=ck1,
    )
    return dict(
        scene=scene, cams=cams, rgb=rgb, mask=mask,
        field=fc, render=rc, ck1=ck1, ck2=ck2, log1=log1, log2=log2,
    )
