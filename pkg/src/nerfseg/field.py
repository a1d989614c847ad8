"""Neural radiance field: frequency encoding, MLP, hand-written gradients.

The field maps (position, view direction) to (color, density) and, for the
joint-head variant, an extra per-sample mask logit. Everything is plain
numpy; backward passes are written out layer by layer so training needs no
autodiff framework. The math is dtype-generic: float32 params for training,
float64 for finite-difference gradient verification.

Architecture:

  x --freq encode--> [3+6*L_pos] --(Linear+ReLU) x trunk_depth--> f  [W]
  f --Linear--> u_sigma --softplus--> sigma
  f --Linear--> u_mask  --sigmoid--> mask            (rgb_sigma_mask only)
  concat(f, freq_encode(d)) --Linear+ReLU--> [W//2] --Linear--> sigmoid--> color

Parameters live in one flat vector; the layout is fixed by param_shapes so
checkpoints are a straight dump of the vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

HEAD_TYPES = ("rgb_sigma", "rgb_sigma_mask")


@dataclass(frozen=True)
class FieldConfig:
    pos_frequencies: int = 6
    dir_frequencies: int = 2
    trunk_depth: int = 4
    trunk_width: int = 128
    head_type: str = "rgb_sigma"

    def __post_init__(self):
        errs = []
        if self.pos_frequencies < 0 or self.dir_frequencies < 0:
            errs.append("frequency counts must be >= 0")
        if self.trunk_depth < 1:
            errs.append(f"trunk_depth must be >= 1, got {self.trunk_depth}")
        if self.trunk_width < 2:
            errs.append(f"trunk_width must be >= 2, got {self.trunk_width}")
        if self.head_type not in HEAD_TYPES:
            errs.append(f"head_type {self.head_type!r} not in {HEAD_TYPES}")
        if errs:
            raise ValueError("invalid field config: " + "; ".join(errs))

    @property
    def pos_dim(self):
        return 3 + 6 * self.pos_frequencies

    @property
    def dir_dim(self):
        return 3 + 6 * self.dir_frequencies

    @property
    def color_hidden(self):
        return max(self.trunk_width // 2, 2)


def encode(x, n_frequencies):
    """Frequency encoding: concat of x and sin/cos(2^l pi x) for l < n.

    Input (..., 3) -> output (..., 3 + 6*n_frequencies), blocks ordered
    [x, sin(2^0 pi x), cos(2^0 pi x), sin(2^1 pi x), cos(2^1 pi x), ...].
    """
    x = np.asarray(x)
    if x.shape[-1] != 3:
        raise ValueError(f"encode expects (..., 3), got {x.shape}")
    parts = [x]
    for l in range(n_frequencies):
        arg = (2.0**l) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1).astype(x.dtype)


def param_shapes(config):
    """Ordered (name, shape) pairs defining the flat parameter layout."""
    w = config.trunk_width
    shapes = []
    in_dim = config.pos_dim
    for i in range(config.trunk_depth):
        shapes.append((f"trunk_w{i}", (w, in_dim)))
        shapes.append((f"trunk_b{i}", (w,)))
        in_dim = w
    shapes.append(("sigma_w", (1, w)))
    shapes.append(("sigma_b", (1,)))
    ch = config.color_hidden
    shapes.append(("color_w0", (ch, w + config.dir_dim)))
    shapes.append(("color_b0", (ch,)))
    shapes.append(("color_w1", (3, ch)))
    shapes.append(("color_b1", (3,)))
    if config.head_type == "rgb_sigma_mask":
        shapes.append(("mask_w", (1, w)))
        shapes.append(("mask_b", (1,)))
    return shapes


def param_count(config):
    return sum(int(np.prod(s)) for _, s in param_shapes(config))


@dataclass
class FieldParams:
    """Flat parameter vector bound to its architecture."""

    values: np.ndarray
    config: FieldConfig

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype not in (np.float32, np.float64):
            raise ValueError(f"params must be float32 or float64, got {v.dtype}")
        v = v.ravel()
        n = param_count(self.config)
        if v.size != n:
            raise ValueError(f"flat vector has {v.size} values, architecture needs {n}")
        object.__setattr__(self, "values", v)

    def unpack(self):
        """Dict of reshaped views into the flat vector (no copies)."""
        out = {}
        off = 0
        for name, shape in param_shapes(self.config):
            size = int(np.prod(shape))
            out[name] = self.values[off : off + size].reshape(shape)
            off += size
        return out

    def astype(self, dtype):
        return FieldParams(self.values.astype(dtype), self.config)


def init_params(config, seed):
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in param_shapes(config):
        if len(shape) == 2:
            bound = np.sqrt(6.0 / shape[1])
            chunks.append(rng.uniform(-bound, bound, size=shape).ravel())
        else:
            chunks.append(np.zeros(shape))
    return FieldParams(np.concatenate(chunks).astype(np.float32), config)


@dataclass
class FieldOutput:
    color: np.ndarray  # (B, 3) in (0, 1)
    sigma: np.ndarray  # (B,) >= 0
    mask: np.ndarray | None = None  # (B,) in (0, 1) for rgb_sigma_mask


def _softplus(u):
    # log(1 + e^u) without overflow for large |u|.
    return np.logaddexp(0.0, u)


def _check_inputs(x, d):
    if not np.all(np.isfinite(x)):
        raise ValueError("field input positions contain non-finite values")
    if d is not None:
        if not np.all(np.isfinite(d)):
            raise ValueError("field input directions contain non-finite values")
        sq = np.einsum("...i,...i->...", np.asarray(d, dtype=np.float64), np.asarray(d, dtype=np.float64))
        if np.abs(sq - 1.0).max() > 3e-6:
            raise ValueError("view directions must be unit length within 1e-6")


def _forward(params, x, d, want_mask, want_color=True):
    """Shared forward pass. Returns (FieldOutput, cache) for backward."""
    p = params.unpack()
    cfg = params.config
    dt = params.values.dtype
    x = np.asarray(x, dtype=dt).reshape(-1, 3)

    xe = encode(x, cfg.pos_frequencies)
    hs = [xe]
    zs = []
    h = xe
    for i in range(cfg.trunk_depth):
        z = h @ p[f"trunk_w{i}"].T + p[f"trunk_b{i}"]
        h = np.maximum(z, 0.0)
        zs.append(z)
        hs.append(h)
    feat = h

    u_sigma = (feat @ p["sigma_w"].T + p["sigma_b"])[:, 0]
    sigma = _softplus(u_sigma)

    cache = {"hs": hs, "zs": zs, "feat": feat, "u_sigma": u_sigma}

    color = None
    if want_color:
        de = encode(np.asarray(d, dtype=dt).reshape(-1, 3), cfg.dir_frequencies)
        if de.shape[0] == 1 and feat.shape[0] > 1:
            de = np.broadcast_to(de, (feat.shape[0], de.shape[1]))
        cin = np.concatenate([feat, de], axis=-1)
        zc = cin @ p["color_w0"].T + p["color_b0"]
        hc = np.maximum(zc, 0.0)
        uc = hc @ p["color_w1"].T + p["color_b1"]
        color = expit(uc)
        cache.update({"de": de, "cin": cin, "zc": zc, "hc": hc, "color": color})

    mask = None
    if want_mask:
        if cfg.head_type != "rgb_sigma_mask":
            raise ValueError("mask output requires head_type rgb_sigma_mask")
        u_mask = (feat @ p["mask_w"].T + p["mask_b"])[:, 0]
        mask = expit(u_mask)
        cache["mask"] = mask

    return FieldOutput(color=color, sigma=sigma, mask=mask), cache


def field_forward(params, x, d, want_mask=None):
    """Evaluate the field at positions x (B, 3) with unit directions d.

    d may be (B, 3) or a single (3,) direction shared by the batch. The mask
    output is produced iff the architecture has the mask head (or the
    explicit want_mask flag forces either way).
    """
    x = np.asarray(x)
    squeeze = x.ndim == 1
    _check_inputs(x, d)
    if want_mask is None:
        want_mask = params.config.head_type == "rgb_sigma_mask"
    out, _ = _forward(params, x, d, want_mask)
    if squeeze:
        out = FieldOutput(
            color=out.color[0],
            sigma=out.sigma[0],
            mask=None if out.mask is None else out.mask[0],
        )
    return out


def density_forward(params, x):
    """Density only; skips the color head. x is (B, 3)."""
    _check_inputs(x, None)
    out, _ = _forward(params, x, None, want_mask=False, want_color=False)
    return out.sigma


def _backward(params, cache, d_color, d_sigma, d_mask=None):
    """Gradient of sum(d_color*color + d_sigma*sigma [+ d_mask*mask]) wrt params.

    Returns a flat gradient vector in the parameter layout order.
    """
    p = params.unpack()
    cfg = params.config
    dt = params.values.dtype
    grads = {name: None for name, _ in param_shapes(cfg)}
    feat = cache["feat"]
    d_feat = np.zeros_like(feat)

    if d_color is not None:
        color = cache["color"]
        duc = np.asarray(d_color, dtype=dt) * color * (1.0 - color)
        hc = cache["hc"]
        grads["color_w1"] = duc.T @ hc
        grads["color_b1"] = duc.sum(axis=0)
        dhc = duc @ p["color_w1"]
        dzc = dhc * (cache["zc"] > 0)
        grads["color_w0"] = dzc.T @ cache["cin"]
        grads["color_b0"] = dzc.sum(axis=0)
        dcin = dzc @ p["color_w0"]
        d_feat += dcin[:, : feat.shape[1]]

    if d_sigma is not None:
        du = np.asarray(d_sigma, dtype=dt) * expit(cache["u_sigma"])
        grads["sigma_w"] = du[:, None].T @ feat
        grads["sigma_b"] = du.sum(keepdims=True)
        d_feat += du[:, None] @ p["sigma_w"]

    if d_mask is not None:
        m = cache["mask"]
        dum = np.asarray(d_mask, dtype=dt) * m * (1.0 - m)
        grads["mask_w"] = dum[:, None].T @ feat
        grads["mask_b"] = dum.sum(keepdims=True)
        d_feat += dum[:, None] @ p["mask_w"]

    dh = d_feat
    for i in range(cfg.trunk_depth - 1, -1, -1):
        dz = dh * (cache["zs"][i] > 0)
        grads[f"trunk_w{i}"] = dz.T @ cache["hs"][i]
        grads[f"trunk_b{i}"] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ p[f"trunk_w{i}"]

    flat = []
    for name, shape in param_shapes(cfg):
        g = grads[name]
        flat.append(np.zeros(shape, dtype=dt).ravel() if g is None else np.asarray(g, dtype=dt).ravel())
    return np.concatenate(flat)


def field_backward(params, x, d, d_color, d_sigma, d_mask=None):
    """Gradient of sum(d_color*color + d_sigma*sigma [+ d_mask*mask]).

    Recomputes the forward pass; training uses the cached variant via
    forward_backward to avoid doing the work twice.
    """
    _check_inputs(x, d)
    _, cache = _forward(params, x, d, want_mask=d_mask is not None)
    return _backward(params, cache, d_color, d_sigma, d_mask)


def forward_backward(params, x, d, upstream_fn, want_mask=False):
    """One forward pass, then backward with upstream grads from upstream_fn.

    upstream_fn(output) must return (d_color, d_sigma, d_mask or None) plus
    an arbitrary payload: ((dc, ds, dm), payload). Returns (output, flat
    gradient, payload). Used by the training loop so the trunk activations
    are computed once per step.
    """
    out, cache = _forward(params, x, d, want_mask)
    (dc, ds, dm), payload = upstream_fn(out)
    return out, _backward(params, cache, dc, ds, dm), payload
