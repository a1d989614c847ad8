"""Volume rendering: ray sampling, transmittance compositing, backward pass.

Quadrature follows the standard emission-absorption model. For samples
t_1..t_N with spacings delta_i and densities sigma_i:

    a_i = sigma_i * delta_i
    T_i = exp(-sum_{j<i} a_j)          (T_1 = 1)
    w_i = T_i * (1 - exp(-a_i))
    C   = sum_i w_i c_i + T_{N+1} * c_bg

Weight math runs in float64 regardless of field dtype so the partition of
unity sum_i w_i + T_{N+1} = 1 holds to round-off; transmittances come from
a cumulative product of the per-segment attenuations, which keeps the
telescoping exact.

Sample jitter uses a counter-based generator keyed on (seed, frame, pixel,
step): reproducible for a given key regardless of batch composition or
evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import camera_rays
from .field import FieldOutput, _backward, _forward

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class RenderConfig:
    samples_per_ray: int = 64
    jitter: bool = True
    background_color: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError(f"samples_per_ray must be >= 2, got {self.samples_per_ray}")
        bg = tuple(float(v) for v in np.atleast_1d(self.background_color).ravel())
        if len(bg) == 1:
            bg = bg * 3
        if len(bg) != 3 or any(not (0.0 <= v <= 1.0) for v in bg):
            raise ValueError(f"background_color must be 3 values in [0, 1], got {bg}")
        object.__setattr__(self, "background_color", bg)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
            raise ValueError("ray origin/direction must be finite")
        if abs(np.dot(d, d) - 1.0) > 3e-6:
            raise ValueError("ray direction must be unit length within 1e-6")
        if not (0.0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


def pixel_to_ray(camera, px, py):
    """Ray through pixel (px, py); integer coordinates hit pixel centers."""
    o, d = camera_rays(camera, px, py)
    intr = camera.intrinsics
    return Ray(origin=o, direction=d, near=intr.near, far=intr.far)


# ---------------------------------------------------------------------------
# Counter-based jitter

def _mix(z):
    # uint64 arithmetic wraps by construction; silence the scalar warnings.
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _combine(k, word):
    with np.errstate(over="ignore"):
        return _mix(k + _GOLD + np.asarray(word, dtype=np.uint64))


def jitter_offsets(seed, frame, pixel, step, n):
    """Stratified offsets in [0, 1), shape (R, n) for R keyed rays.

    frame/pixel may be scalars or (R,) integer arrays. The value for a given
    (seed, frame, pixel, step, sample) never depends on batch membership.
    """
    with np.errstate(over="ignore"):
        k = _mix(np.uint64(seed) + _GOLD)
        k = _combine(k, frame)
        k = _combine(k, pixel)
        k = _combine(k, step)
        k = np.atleast_1d(k)
        idx = (np.arange(n, dtype=np.uint64) + np.uint64(1)) * _GOLD
        z = _mix(k[:, None] + idx)
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


def sample_segments(near, far, n, offsets=None):
    """Stratified sample positions and spacings along [near, far].

    near/far are scalars or (R,) arrays. offsets is None for deterministic
    bin midpoints, else (R, n) values in [0, 1). Returns (t, delta), each
    (R, n): t_i = bin_start + u_i * bin_width, delta_i = t_{i+1} - t_i with
    the last spacing closed against far.
    """
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if np.any(far <= near):
        raise ValueError("far must exceed near for every ray")
    r = near.shape[0]
    width = (far - near) / n
    starts = near[:, None] + width[:, None] * np.arange(n)
    if offsets is None:
        u = 0.5
    else:
        u = np.asarray(offsets, dtype=np.float64)
        if u.shape != (r, n):
            raise ValueError(f"offsets shape {u.shape}, expected {(r, n)}")
        if u.min() < 0.0 or u.max() >= 1.0:
            raise ValueError("jitter offsets must lie in [0, 1)")
    t = starts + width[:, None] * u
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = far - t[:, -1]
    return t, delta


def sample_ray(ray, config, offsets=None):
    """Sampling for a single Ray; see sample_segments."""
    t, delta = sample_segments(ray.near, ray.far, config.samples_per_ray, offsets)
    return t[0], delta[0]


# ---------------------------------------------------------------------------
# Compositing

def transmittance_weights(sigma, delta):
    """(T, w) for densities sigma and spacings delta, shapes (..., N).

    T has N+1 entries per ray: T[..., i] is the transmittance reaching
    sample i (T[..., 0] = 1) and T[..., N] is what survives the whole ray.
    Computed in float64.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("densities must be non-negative")
    if np.any(delta < 0):
        raise ValueError("sample spacings must be non-negative")
    att = np.exp(-sigma * delta)
    t_shape = sigma.shape[:-1] + (sigma.shape[-1] + 1,)
    T = np.ones(t_shape, dtype=np.float64)
    np.cumprod(att, axis=-1, out=T[..., 1:])
    w = T[..., :-1] * (1.0 - att)
    return T, w


def composite_backward(T, w, delta, d_w, d_t_end):
    """d(loss)/d(sigma) given upstream grads on the weights and end term.

    For a_i = sigma_i * delta_i:
      dL/da_i = d_w_i * T_i * e^{-a_i}  -  sum_{k>i} d_w_k * w_k  -  d_t_end * T_end
    (all samples after i shrink when a_i grows; the diagonal term grows w_i).
    """
    att = np.where(T[..., :-1] > 0, T[..., 1:] / np.where(T[..., :-1] > 0, T[..., :-1], 1.0), 0.0)
    dww = d_w * w
    total = dww.sum(axis=-1, keepdims=True)
    suffix = total - np.cumsum(dww, axis=-1)  # sum over k > i
    da = d_w * T[..., :-1] * att - suffix - d_t_end[..., None] * T[..., -1:]
    return da * delta


def _field_points(origins, dirs, t):
    # (R, N, 3) sample positions; broadcasting keeps this allocation-light.
    return origins[:, None, :] + t[..., None] * dirs[:, None, :]


def composite_rays(params, origins, dirs, t, delta, background, want_mask=False, with_cache=False):
    """Render a batch of rays given precomputed sample positions.

    origins/dirs: (R, 3) with unit dirs; t/delta: (R, N); background: (3,)
    or per-ray (R, 3). Returns a dict with "color" (R, 3) float64, "sigma",
    "weights", "t_end", and "mask" (R,) when want_mask. with_cache adds the
    internals needed for composite_rays_backward.
    """
    r, n = t.shape
    pts = _field_points(origins, dirs, t).reshape(r * n, 3)
    dirs_rep = np.repeat(np.asarray(dirs), n, axis=0)
    out, cache = _forward(params, pts, dirs_rep, want_mask)
    sigma = out.sigma.reshape(r, n)
    color = out.color.reshape(r, n, 3)
    T, w = transmittance_weights(sigma, delta)
    bg = np.asarray(background, dtype=np.float64)
    rendered = np.einsum("rn,rnc->rc", w, color.astype(np.float64)) + T[..., -1:] * bg
    result = {
        "color": rendered,
        "sigma": sigma,
        "weights": w,
        "transmittance": T,
        "t_end": T[..., -1],
    }
    if want_mask:
        mask = out.mask.reshape(r, n)
        result["mask"] = np.einsum("rn,rn->r", w, mask.astype(np.float64))
        result["mask_samples"] = mask
    if with_cache:
        result["_cache"] = cache
        result["_color_samples"] = color
        result["_delta"] = delta
        result["_background"] = bg
    return result


def composite_rays_backward(params, result, d_color, d_mask=None):
    """Flat parameter gradient for upstream grads on rendered color/mask.

    d_color: (R, 3); d_mask: (R,) or None. Uses the cache stored by
    composite_rays(..., with_cache=True).
    """
    cache = result["_cache"]
    w = result["weights"]
    T = result["transmittance"]
    delta = result["_delta"]
    color = result["_color_samples"].astype(np.float64)
    r, n, _ = color.shape
    d_color = np.asarray(d_color, dtype=np.float64)

    d_w = np.einsum("rc,rnc->rn", d_color, color)
    d_t_end = d_color @ result["_background"]
    d_c_samples = w[..., None] * d_color[:, None, :]
    d_m_samples = None
    if d_mask is not None:
        m = result["mask_samples"].astype(np.float64)
        d_mask = np.asarray(d_mask, dtype=np.float64)
        d_w = d_w + d_mask[:, None] * m
        d_m_samples = (w * d_mask[:, None]).reshape(r * n)
    d_sigma = composite_backward(T, w, delta, d_w, d_t_end).reshape(r * n)
    dt = params.values.dtype
    return _backward(
        params,
        cache,
        d_c_samples.reshape(r * n, 3).astype(dt),
        d_sigma.astype(dt),
        None if d_m_samples is None else d_m_samples.astype(dt),
    )


@dataclass
class RaySamples:
    """Per-sample record along one ray, for inspection and back-projection."""

    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    transmittance: np.ndarray  # N+1 entries
    weights: np.ndarray
    mask: np.ndarray | None = None


def ray_samples(params, ray, config, offsets=None):
    """Deterministic (unless offsets given) per-sample evaluation of a ray."""
    t, delta = sample_ray(ray, config, None if offsets is None else offsets[None])
    want_mask = params.config.head_type == "rgb_sigma_mask"
    res = composite_rays(
        params,
        ray.origin[None],
        ray.direction[None],
        t[None],
        delta[None],
        config.background_color,
        want_mask=want_mask,
        with_cache=True,
    )
    return RaySamples(
        t=t,
        delta=delta,
        sigma=res["sigma"][0],
        color=res["_color_samples"][0],
        transmittance=res["transmittance"][0],
        weights=res["weights"][0],
        mask=res["mask_samples"][0] if want_mask else None,
    )


def render_color(params, ray, config, offsets=None):
    """Rendered color (3,) float64 for a single ray. Deterministic unless
    jitter offsets are passed explicitly."""
    t, delta = sample_ray(ray, config, None if offsets is None else offsets[None])
    res = composite_rays(
        params, ray.origin[None], ray.direction[None], t[None], delta[None],
        config.background_color,
    )
    return res["color"][0]


def render_mask_joint(params, ray, config, offsets=None):
    """Rendered mask scalar for the joint head: sum_i w_i m_i, no background
    term (empty space reads as mask 0)."""
    if params.config.head_type != "rgb_sigma_mask":
        raise ValueError("render_mask_joint requires head_type rgb_sigma_mask")
    t, delta = sample_ray(ray, config, None if offsets is None else offsets[None])
    res = composite_rays(
        params, ray.origin[None], ray.direction[None], t[None], delta[None],
        config.background_color, want_mask=True,
    )
    return float(res["mask"][0])


def query_density(params, points, chunk=131072):
    """Densities for (N, 3) points, chunked to bound peak memory."""
    from .field import density_forward

    points = np.asarray(points, dtype=params.values.dtype).reshape(-1, 3)
    out = np.empty(points.shape[0], dtype=np.float64)
    for lo in range(0, points.shape[0], chunk):
        out[lo : lo + chunk] = density_forward(params, points[lo : lo + chunk])
    return out


def render_view(params, camera, config, want_mask=False, ray_chunk=2048):
    """Render a full camera view deterministically (no jitter).

    Returns (H, W, 3) float64 color plus (H, W) mask when requested.
    """
    intr = camera.intrinsics
    h, w = intr.height, intr.width
    px, py = np.meshgrid(np.arange(w), np.arange(h))
    origins, dirs = camera_rays(camera, px.ravel(), py.ravel())
    n = config.samples_per_ray
    color = np.empty((h * w, 3), dtype=np.float64)
    mask = np.empty(h * w, dtype=np.float64) if want_mask else None
    for lo in range(0, h * w, ray_chunk):
        sl = slice(lo, min(lo + ray_chunk, h * w))
        t, delta = sample_segments(
            np.full(sl.stop - sl.start, intr.near), np.full(sl.stop - sl.start, intr.far), n
        )
        res = composite_rays(
            params, origins[sl], dirs[sl], t, delta, config.background_color,
            want_mask=want_mask,
        )
        color[sl] = res["color"]
        if want_mask:
            mask[sl] = res["mask"]
    color = color.reshape(h, w, 3)
    return (color, mask.reshape(h, w)) if want_mask else (color, None)
