"""Procedural orchard generation and the analytic ray tracer."""

import numpy as np
import pytest

from conftest import one_sphere_scene, ring_cameras
from nerfseg.cameras import camera_rays, symmetric_intrinsics, make_ring_poses
from nerfseg.scene import (
    InfeasibleSceneError,
    OrchardSpec,
    Scene,
    fruit_occupancy,
    generate_orchard,
    ray_trace_view,
    trace_hits,
)


def test_empty_scene_renders_uniform_background():
    spec = OrchardSpec(background_albedo=0.5)
    scene = Scene(spec=spec, primitives=())
    cam = ring_cameras(1, res=8)[0]
    img = ray_trace_view(scene, cam, "rgb")
    expected = np.float32(np.round(0.5 * 255.0) / 255.0)
    assert img.shape == (8, 8, 3)
    assert img.dtype == np.float32
    assert np.all(img == expected)


def test_centered_sphere_mask_centroid():
    scene = one_sphere_scene()
    cam = ring_cameras(1, res=64, height=0.0)[0]
    mask = ray_trace_view(scene, cam, "mask", target_classes={1})
    assert mask.sum() > 0
    ys, xs = np.nonzero(mask)
    intr = cam.intrinsics
    assert abs(xs.mean() - intr.cx) < 0.5
    assert abs(ys.mean() - intr.cy) < 0.5


def brute_force_sphere_pixels(cam, center, radius, supersample=4):
    """Count foreground pixels by sub-pixel ray-sphere intersection.

    Independent of the tracer: builds the quadratic discriminant directly
    on a supersampled grid and averages coverage per pixel.
    """
    intr = cam.intrinsics
    n = supersample
    sub = (np.arange(intr.width * n) - (n - 1) / 2.0) / n
    px, py = np.meshgrid(sub, sub)
    o, d = camera_rays(cam, px.ravel(), py.ravel())
    oc = o - np.asarray(center)
    b = np.einsum("ij,ij->i", oc, d)
    disc = b * b - (np.einsum("ij,ij->i", oc, oc) - radius * radius)
    hit = (disc >= 0) & (-b + np.sqrt(np.maximum(disc, 0.0)) > 0)
    return hit.sum() / (n * n)


def test_sphere_pixel_count_matches_projected_area():
    r, dist = 0.3, 1.6
    scene = one_sphere_scene(radius=r)
    cam = ring_cameras(1, res=64, height=0.0)[0]
    mask = ray_trace_view(scene, cam, "mask", target_classes={1})
    count = int(mask.sum())
    focal = cam.intrinsics.fx
    analytic = np.pi * (focal * r / dist) ** 2
    assert abs(count - analytic) / analytic < 0.10
    oracle = brute_force_sphere_pixels(cam, (0, 0, 0), r)
    assert abs(count - oracle) / oracle < 0.05


def test_mask_matches_first_hit_classes():
    scene = generate_orchard(OrchardSpec(fruit_count=3, rng_seed=5))
    cam = ring_cameras(1, res=32, height=0.8)[0]
    intr = cam.intrinsics
    px, py = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    o, d = camera_rays(cam, px.ravel(), py.ravel())
    _, prim_i = trace_hits(scene, o, d)
    classes = np.array(
        [scene.primitives[i].class_id if i >= 0 else 0 for i in prim_i]
    ).reshape(intr.height, intr.width)
    mask = ray_trace_view(scene, cam, "mask", target_classes={1, 2, 3})
    assert np.array_equal(mask > 0, classes > 0)


def test_mask_requires_target_classes():
    scene = one_sphere_scene()
    cam = ring_cameras(1, res=8)[0]
    with pytest.raises(ValueError, match="target_classes"):
        ray_trace_view(scene, cam, "mask")
    with pytest.raises(ValueError, match="target_classes"):
        ray_trace_view(scene, cam, "mask", target_classes=set())


def test_multiclass_levels_default_grid():
    scene = generate_orchard(OrchardSpec(rng_seed=0))
    assert scene.n_classes == 8
    seen = set()
    for cam in ring_cameras(8, res=48, height=0.6):
        img = ray_trace_view(scene, cam, "multiclass")
        vals = set(np.unique(img).tolist())
        levels = {np.float32((k + 1) / 8.0) for k in range(8)} | {np.float32(0.0)}
        assert vals <= levels
        seen |= vals
    # every fruit shows up somewhere on the ring
    assert len(seen - {np.float32(0.0)}) == 8


def test_multiclass_custom_levels_and_arity_check():
    scene = generate_orchard(OrchardSpec(fruit_count=2, rng_seed=1))
    cam = ring_cameras(1, res=32, height=0.6)[0]
    img = ray_trace_view(scene, cam, "multiclass", class_levels=[0.5, 1.0])
    assert set(np.unique(img)) <= {np.float32(0.0), np.float32(0.5), np.float32(1.0)}
    with pytest.raises(ValueError, match="class levels"):
        ray_trace_view(scene, cam, "multiclass", class_levels=[0.5])


def test_rgb_values_on_8bit_grid():
    scene = generate_orchard(OrchardSpec(rng_seed=2))
    cam = ring_cameras(1, res=32, height=0.5)[0]
    img = ray_trace_view(scene, cam, "rgb")
    scaled = np.asarray(img, dtype=np.float64) * 255.0
    assert np.abs(scaled - np.round(scaled)).max() < 1e-3


def test_orchard_determinism():
    a = generate_orchard(OrchardSpec(rng_seed=7))
    b = generate_orchard(OrchardSpec(rng_seed=7))
    for pa, pb in zip(a.fruits, b.fruits):
        assert np.array_equal(pa.center, pb.center)
        assert np.array_equal(pa.albedo, pb.albedo)
    c = generate_orchard(OrchardSpec(rng_seed=8))
    assert not np.array_equal(a.fruits[0].center, c.fruits[0].center)


def test_orchard_geometry_constraints():
    spec = OrchardSpec(rng_seed=3)
    scene = generate_orchard(spec)
    c = np.asarray(spec.canopy_center)
    r = spec.fruit_radius
    centers = np.array([f.center for f in scene.fruits])
    assert len(centers) == spec.fruit_count
    # whole spheres inside the canopy ball
    dist = np.linalg.norm(centers - c, axis=1)
    assert np.all(dist <= spec.canopy_radius - r + 1e-12)
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            assert np.linalg.norm(centers[i] - centers[j]) > 2.0 * r
    assert np.abs(centers).max() + r < 1.0


def test_orchard_fruits_spread_through_volume():
    # volume placement, not a shell: over a few seeds the radial positions
    # must reach both the inner half and the outer half of the canopy
    inner = outer = 0
    for seed in range(6):
        spec = OrchardSpec(rng_seed=seed)
        scene = generate_orchard(spec)
        c = np.asarray(spec.canopy_center)
        dist = np.linalg.norm([f.center - c for f in scene.fruits], axis=1)
        half = 0.5 * (spec.canopy_radius - spec.fruit_radius)
        inner += int((dist < half).sum())
        outer += int((dist >= half).sum())
    assert inner > 0 and outer > 0


def test_orchard_trunk_below_canopy():
    spec = OrchardSpec(rng_seed=0)
    scene = generate_orchard(spec)
    trunk = [p for p in scene.primitives if hasattr(p, "z_min")]
    assert len(trunk) == 1
    t = trunk[0]
    assert t.class_id == 0
    # trunk top at the canopy floor: stays out of the canopy extraction box
    assert t.z_max == spec.canopy_center[2] - spec.canopy_radius
    assert abs((t.z_max - t.z_min) - spec.trunk_height) < 1e-12


def test_infeasible_orchard_raises():
    with pytest.raises(InfeasibleSceneError, match="could not place"):
        generate_orchard(OrchardSpec(fruit_count=200, rng_seed=0))


def test_spec_validation_messages():
    with pytest.raises(ValueError, match="canopy sphere must fit"):
        OrchardSpec(canopy_center=(0.6, 0.0, 0.15))
    with pytest.raises(ValueError, match="twice the"):
        OrchardSpec(fruit_radius=0.3, canopy_radius=0.5)
    with pytest.raises(ValueError, match="background_albedo"):
        OrchardSpec(background_albedo=1.5)
    with pytest.raises(ValueError, match="fruit_count"):
        OrchardSpec(fruit_count=0)


def test_trace_hits_depth_ordering():
    # a ray aimed at a fruit center reports the front surface, not the back
    scene = generate_orchard(OrchardSpec(fruit_count=1, rng_seed=4))
    fruit = scene.fruits[0]
    cam_pos = fruit.center * 2.5
    intr = symmetric_intrinsics(64.0, 1, 1, 0.1, 10.0)
    o = cam_pos[None]
    d = (fruit.center - cam_pos)[None]
    d = d / np.linalg.norm(d)
    t, idx = trace_hits(scene, o, d)
    assert idx[0] >= 0
    assert scene.primitives[idx[0]].class_id == 1
    assert t[0] < np.linalg.norm(cam_pos - fruit.center)


def test_fruit_occupancy_labels():
    scene = generate_orchard(OrchardSpec(fruit_count=4, rng_seed=9))
    pts = np.array([f.center for f in scene.fruits])
    labels = fruit_occupancy(scene, pts)
    assert labels.tolist() == [1, 2, 3, 4]
    outside = np.array([[0.99, 0.99, 0.99]])
    assert fruit_occupancy(scene, outside).tolist() == [0]


def test_shading_brightens_toward_light():
    # lit side of a fruit reads brighter than the shadow side
    scene = generate_orchard(OrchardSpec(fruit_count=1, rng_seed=0))
    means = []
    for cam in ring_cameras(8, res=48, height=1.2):
        img = ray_trace_view(scene, cam, "rgb")
        hit = fruit_pixels(scene, cam)
        if hit.sum() >= 10:
            means.append(img[hit].mean())
    assert len(means) >= 4
    assert max(means) > min(means) + 0.01


def fruit_pixels(scene, cam):
    intr = cam.intrinsics
    px, py = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    o, d = camera_rays(cam, px.ravel(), py.ravel())
    _, prim_i = trace_hits(scene, o, d)
    classes = np.array(
        [scene.primitives[i].class_id if i >= 0 else 0 for i in prim_i]
    )
    return (classes > 0).reshape(intr.height, intr.width)
