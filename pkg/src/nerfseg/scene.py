"""Procedural orchard scenes and the analytic ray tracer that images them.

A scene is a handful of exact primitives: one trunk cylinder topped by K
fruit spheres scattered through an open canopy ball. The canopy is a
placement region, not a surface; leaving it open keeps every fruit and all
of the air between them visible from a camera ring, so a radiance field
trained on the renders is supervised everywhere it will later be sampled.
Images are ray traced per pixel with Lambertian shading plus a constant
ambient term, which doubles as the ground truth for both reconstruction
and segmentation.

Class ids: 0 is background/non-fruit (trunk, empty space), fruits are
1..K in generation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cameras import camera_rays

AMBIENT = 0.3

TRUNK_ALBEDO = (0.36, 0.23, 0.12)

_HIT_EPS = 1e-9
_MAX_ATTEMPTS_PER_FRUIT = 1000


class InfeasibleSceneError(ValueError):
    """Raised when rejection sampling cannot place the requested fruits."""


@dataclass(frozen=True)
class OrchardSpec:
    """Parameters of a procedural orchard. Lengths are world units.

    The canopy ball (and therefore every fruit) must fit inside the
    [-1, 1]^3 box; the default extraction grid covers exactly that ball's
    bounding box.
    """

    fruit_count: int = 8
    fruit_radius: float = 0.12
    canopy_center: tuple = (0.0, 0.0, 0.15)
    canopy_radius: float = 0.55
    trunk_radius: float = 0.06
    trunk_height: float = 0.5
    background_albedo: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        errs = []
        if self.fruit_count < 1:
            errs.append(f"fruit_count must be >= 1, got {self.fruit_count}")
        if self.fruit_radius <= 0:
            errs.append(f"fruit_radius must be positive, got {self.fruit_radius}")
        if self.canopy_radius <= 2 * self.fruit_radius:
            errs.append(
                f"canopy_radius={self.canopy_radius} must exceed twice the "
                f"fruit_radius={self.fruit_radius}"
            )
        if self.trunk_radius <= 0 or self.trunk_height <= 0:
            errs.append("trunk dimensions must be positive")
        if not (0.0 <= self.background_albedo <= 1.0):
            errs.append(f"background_albedo={self.background_albedo} outside [0, 1]")
        c = np.asarray(self.canopy_center, dtype=np.float64)
        if c.shape != (3,):
            errs.append("canopy_center must be a 3-vector")
        elif np.any(np.abs(c) + self.canopy_radius > 1.0):
            errs.append("canopy sphere must fit inside the [-1, 1]^3 box")
        if errs:
            raise ValueError("invalid orchard spec: " + "; ".join(errs))


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray
    class_id: int


@dataclass(frozen=True)
class Cylinder:
    """Finite capped cylinder with a vertical (+z) axis."""

    center_xy: np.ndarray
    radius: float
    z_min: float
    z_max: float
    albedo: np.ndarray
    class_id: int


@dataclass(frozen=True)
class Scene:
    spec: OrchardSpec
    primitives: tuple
    light_dir: np.ndarray = field(
        default_factory=lambda: _unit((0.35, 0.2, 0.88))
    )

    @property
    def fruits(self):
        return tuple(p for p in self.primitives if p.class_id > 0)

    @property
    def n_classes(self):
        """Number of fruit classes K (labels run 1..K)."""
        return max((p.class_id for p in self.primitives), default=0)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def generate_orchard(spec):
    """Build the scene for a spec. Deterministic given spec.rng_seed.

    Fruit centers are rejection sampled uniformly through the canopy ball,
    shrunk by one fruit radius so every sphere stays strictly inside the
    canopy. Pairwise center distances must exceed 2*fruit_radius; placement
    failing after a bounded number of attempts raises InfeasibleSceneError.
    The trunk runs from the ground up to the canopy floor so it never
    enters the extraction box around the canopy.
    """
    rng = np.random.default_rng(spec.rng_seed)
    c = np.asarray(spec.canopy_center, dtype=np.float64)
    r = spec.fruit_radius
    reach = spec.canopy_radius - r

    centers = []
    attempts = 0
    budget = _MAX_ATTEMPTS_PER_FRUIT * spec.fruit_count
    while len(centers) < spec.fruit_count:
        if attempts >= budget:
            raise InfeasibleSceneError(
                f"could not place {spec.fruit_count} fruits of radius {r} after "
                f"{budget} attempts; reduce fruit_count or fruit_radius"
            )
        attempts += 1
        z = rng.uniform(-1.0, 1.0)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        s = np.sqrt(1.0 - z * z)
        direction = np.array([s * np.cos(phi), s * np.sin(phi), z])
        dist = reach * rng.uniform(0.0, 1.0) ** (1.0 / 3.0)
        cand = c + dist * direction
        if all(np.linalg.norm(cand - p) > 2.0 * r for p in centers):
            centers.append(cand)

    prims = []
    z_top = c[2] - spec.canopy_radius
    prims.append(
        Cylinder(
            center_xy=c[:2].copy(),
            radius=spec.trunk_radius,
            z_min=z_top - spec.trunk_height,
            z_max=z_top,
            albedo=np.asarray(TRUNK_ALBEDO),
            class_id=0,
        )
    )
    for k, center in enumerate(centers):
        jitter = rng.uniform(0.0, 1.0, size=3)
        albedo = np.array(
            [
                0.72 + 0.10 * jitter[0],
                0.10 + 0.05 * jitter[1],
                0.08 + 0.04 * jitter[2],
            ]
        )
        prims.append(Sphere(center=center, radius=r, albedo=albedo, class_id=k + 1))
    return Scene(spec=spec, primitives=tuple(prims))


def _intersect_sphere(origins, dirs, sphere):
    """Smallest positive hit parameter per ray, inf when missed."""
    oc = origins - sphere.center
    b = np.einsum("ij,ij->i", oc, dirs)
    cterm = np.einsum("ij,ij->i", oc, oc) - sphere.radius**2
    disc = b * b - cterm
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > _HIT_EPS, t0, np.where(t1 > _HIT_EPS, t1, np.inf))
    return np.where(hit, t, np.inf)


def _intersect_cylinder(origins, dirs, cyl):
    ox = origins[:, 0] - cyl.center_xy[0]
    oy = origins[:, 1] - cyl.center_xy[1]
    dx = dirs[:, 0]
    dy = dirs[:, 1]
    a = dx * dx + dy * dy
    b = ox * dx + oy * dy
    cterm = ox * ox + oy * oy - cyl.radius**2
    best = np.full(origins.shape[0], np.inf)

    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - a * cterm
        ok = (disc > 0) & (a > 1e-16)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for t_side in ((-b - sq) / a, (-b + sq) / a):
            z = origins[:, 2] + t_side * dirs[:, 2]
            good = ok & (t_side > _HIT_EPS) & (z >= cyl.z_min) & (z <= cyl.z_max)
            best = np.where(good & (t_side < best), t_side, best)

        # End caps.
        for z_cap in (cyl.z_min, cyl.z_max):
            t_cap = (z_cap - origins[:, 2]) / dirs[:, 2]
            x = ox + t_cap * dx
            y = oy + t_cap * dy
            good = (
                np.isfinite(t_cap)
                & (t_cap > _HIT_EPS)
                & (x * x + y * y <= cyl.radius**2)
            )
            best = np.where(good & (t_cap < best), t_cap, best)
    return best


def _normal_at(prim, points):
    if isinstance(prim, Sphere):
        n = points - prim.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.zeros_like(points)
    rel_x = points[:, 0] - prim.center_xy[0]
    rel_y = points[:, 1] - prim.center_xy[1]
    on_top = points[:, 2] > prim.z_max - 1e-7
    on_bottom = points[:, 2] < prim.z_min + 1e-7
    side = ~(on_top | on_bottom)
    n[on_top] = (0.0, 0.0, 1.0)
    n[on_bottom] = (0.0, 0.0, -1.0)
    if np.any(side):
        lat = np.stack([rel_x[side], rel_y[side], np.zeros(side.sum())], axis=-1)
        n[side] = lat / np.linalg.norm(lat, axis=-1, keepdims=True)
    return n


def trace_hits(scene, origins, dirs):
    """First-hit query for a batch of rays.

    Returns (t, prim_index) with t = inf and prim_index = -1 for misses.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    best_t = np.full(origins.shape[0], np.inf)
    best_i = np.full(origins.shape[0], -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        if isinstance(prim, Sphere):
            t = _intersect_sphere(origins, dirs, prim)
        else:
            t = _intersect_cylinder(origins, dirs, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)
    return best_t, best_i


def ray_trace_view(scene, camera, mode, target_classes=None, class_levels=None):
    """Render one camera view of the scene.

    mode "rgb": (H, W, 3) float32 shaded image, values quantized to the
    k/255 grid so images survive 8-bit round trips bit-exactly. Background
    pixels take the scene's uniform gray background_albedo.

    mode "mask": (H, W) float32 binary image, 1 where the first hit belongs
    to target_classes (required), else 0. Background renders black.

    mode "multiclass": (H, W) float32 image where a first hit of fruit
    class k renders as class_levels[k-1] (default k/K); non-fruit is 0.
    """
    intr = camera.intrinsics
    h, w = intr.height, intr.width
    px, py = np.meshgrid(np.arange(w), np.arange(h))
    origins, dirs = camera_rays(camera, px.ravel(), py.ravel())
    t, prim_i = trace_hits(scene, origins, dirs)
    hit = prim_i >= 0

    if mode == "rgb":
        img = np.full((h * w, 3), scene.spec.background_albedo, dtype=np.float64)
        if np.any(hit):
            pts = origins[hit] + t[hit, None] * dirs[hit]
            idx = prim_i[hit]
            shade = np.zeros((hit.sum(), 3))
            for i, prim in enumerate(scene.primitives):
                sel = idx == i
                if not np.any(sel):
                    continue
                n = _normal_at(prim, pts[sel])
                lam = np.maximum(0.0, n @ scene.light_dir)
                shade[sel] = prim.albedo * (AMBIENT + (1.0 - AMBIENT) * lam)[:, None]
            img[hit] = np.clip(shade, 0.0, 1.0)
        img = np.round(img * 255.0) / 255.0
        return img.reshape(h, w, 3).astype(np.float32)

    prim_class = np.array([p.class_id for p in scene.primitives] + [0])
    cls = prim_class[prim_i]  # prim_i == -1 indexes the trailing 0

    if mode == "mask":
        if not target_classes:
            raise ValueError("mask mode requires a non-empty target_classes set")
        targets = sorted(int(k) for k in target_classes)
        img = np.isin(cls, targets).astype(np.float32)
        return img.reshape(h, w)

    if mode == "multiclass":
        n_k = scene.n_classes
        if class_levels is None:
            class_levels = [(k + 1) / n_k for k in range(n_k)]
        if len(class_levels) != n_k:
            raise ValueError(
                f"need {n_k} class levels, got {len(class_levels)}"
            )
        levels = np.concatenate([[0.0], np.asarray(class_levels, dtype=np.float64)])
        img = levels[cls].astype(np.float32)
        return img.reshape(h, w)

    raise ValueError(f"unknown render mode {mode!r}")


def fruit_occupancy(scene, points):
    """Fruit class id (0 = none) containing each query point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(points.shape[0], dtype=np.int64)
    for prim in scene.fruits:
        inside = np.linalg.norm(points - prim.center, axis=-1) <= prim.radius
        out[inside & (out == 0)] = prim.class_id
    return out
