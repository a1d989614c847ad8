"""Pinhole cameras and ring-of-views pose generation.

Conventions used throughout the package:

* World frame: right-handed, +z up. Scene content lives near the origin.
* Camera frame: looks along its local -z axis, +x right, +y down in the
  image. The camera-to-world matrix is a rigid transform (rotation block
  orthonormal, determinant +1).
* Pixel coordinates: integer coordinates address pixel centers, so pixel
  (i, j) of a WxH image sits at continuous coordinate (i, j) and the
  principal point of a symmetric camera is ((W-1)/2, (H-1)/2). px runs
  along image columns (width), py along rows (height).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics plus the ray clip range shared by a camera set."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        errs = []
        if not (self.width >= 1 and self.height >= 1):
            errs.append(f"resolution must be >= 1, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            errs.append(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0.0 <= self.cx <= self.width):
            errs.append(f"cx={self.cx} outside [0, {self.width}]")
        if not (0.0 <= self.cy <= self.height):
            errs.append(f"cy={self.cy} outside [0, {self.height}]")
        if not (0.0 < self.near < self.far):
            errs.append(f"need 0 < near < far, got near={self.near} far={self.far}")
        if errs:
            raise ValueError("invalid intrinsics: " + "; ".join(errs))


def symmetric_intrinsics(focal, width, height, near, far):
    """Intrinsics with fx=fy=focal and the principal point at the image center."""
    return Intrinsics(
        fx=float(focal),
        fy=float(focal),
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=int(width),
        height=int(height),
        near=float(near),
        far=float(far),
    )


@dataclass(frozen=True)
class CameraFrame:
    """A posed pinhole camera. camera_to_world is 4x4 float64."""

    camera_to_world: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        m = np.asarray(self.camera_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"camera_to_world must be 4x4, got {m.shape}")
        object.__setattr__(self, "camera_to_world", m)
        r = m[:3, :3]
        if not np.all(np.isfinite(m)):
            raise ValueError("camera_to_world contains non-finite entries")
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("rotation block is not orthonormal within 1e-9")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation block has negative determinant (reflection)")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 0:
            raise ValueError("bottom row must be exactly [0 0 0 1]")

    @property
    def origin(self):
        return self.camera_to_world[:3, 3].copy()

    @property
    def rotation(self):
        return self.camera_to_world[:3, :3].copy()


def look_at_pose(eye, lookat, up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix for a camera at eye looking toward lookat.

    Raises ValueError when eye coincides with lookat or the view direction is
    parallel to up (the roll around the optical axis is then undefined).
    """
    eye = np.asarray(eye, dtype=np.float64)
    lookat = np.asarray(lookat, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = lookat - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("degenerate pose: eye coincides with lookat")
    forward = forward / norm
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-12:
        raise ValueError("degenerate pose: view direction parallel to up vector")
    right = right / rnorm
    # Image y grows downward, so the camera y axis is the world *down* of the
    # view: cross(z_cam, x_cam) with z_cam = -forward.
    z_cam = -forward
    y_cam = np.cross(z_cam, right)
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = y_cam
    m[:3, 2] = z_cam
    m[:3, 3] = eye
    # Re-orthonormalize to keep the constructor's 1e-9 gate comfortable.
    u, _, vt = np.linalg.svd(m[:3, :3])
    m[:3, :3] = u @ vt
    return m


def make_ring_poses(n_views, ring_radius, ring_height, lookat, intrinsics):
    """n_views cameras evenly spaced on a horizontal circle, all aimed at lookat.

    The circle is centered on (lookat_x, lookat_y) at world height ring_height.
    Azimuths are 2*pi*k/n_views for k = 0..n_views-1.
    """
    if n_views < 1:
        raise ValueError(f"n_views must be >= 1, got {n_views}")
    if ring_radius <= 0:
        raise ValueError(f"ring_radius must be positive, got {ring_radius}")
    lookat = np.asarray(lookat, dtype=np.float64)
    frames = []
    for k in range(n_views):
        theta = 2.0 * np.pi * k / n_views
        eye = np.array(
            [
                lookat[0] + ring_radius * np.cos(theta),
                lookat[1] + ring_radius * np.sin(theta),
                ring_height,
            ]
        )
        frames.append(CameraFrame(look_at_pose(eye, lookat), intrinsics))
    return frames


def camera_rays(camera, px, py):
    """World-space rays through the given pixel coordinates.

    px, py are continuous pixel coordinates (scalars or equal-shape arrays);
    integer values address pixel centers. Returns (origins, directions) with
    shape (..., 3); directions are unit length. The ray through the principal
    point leaves along the optical axis.
    """
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    intr = camera.intrinsics
    x = (px - intr.cx) / intr.fx
    y = -(py - intr.cy) / intr.fy
    z = -np.ones_like(x)
    d_cam = np.stack([x, y, z], axis=-1)
    d_world = d_cam @ camera.rotation.T
    d_world = d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.origin, d_world.shape).copy()
    return origins, d_world


def project(camera, points):
    """Project world points into the image. Returns (px, py, depth).

    depth is the distance along the optical axis (positive in front of the
    camera). Points at or behind the camera plane get depth <= 0 and
    non-finite pixel coordinates.
    """
    points = np.asarray(points, dtype=np.float64)
    rel = points - camera.origin
    cam = rel @ camera.rotation  # world->camera: multiply by R^T, i.e. rel @ R
    intr = camera.intrinsics
    depth = -cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = intr.cx + intr.fx * cam[..., 0] / depth
        py = intr.cy - intr.fy * cam[..., 1] / depth
    bad = depth <= 0
    if np.any(bad):
        px = np.where(bad, np.nan, px)
        py = np.where(bad, np.nan, py)
    return px, py, depth
