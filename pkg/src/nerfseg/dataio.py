"""File formats: datasets (PPM/PGM + JSON manifest), checkpoints, PLY, CSV.

All writers are atomic (write to a sibling temp file, then rename) and
byte-deterministic for identical inputs. Floats in text formats are written
with repr so they parse back bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .cameras import CameraFrame, Intrinsics
from .field import FieldConfig, param_count

DATASET_KINDS = ("rgb", "binary_mask", "multiclass_mask")
CHECKPOINT_MAGIC = b"NFSEGCKP"
CHECKPOINT_VERSION = 1
STAGES = ("stage1_rgb", "stage2_mask", "joint")
_STAGE_CODE = {name: i + 1 for i, name in enumerate(STAGES)}
_HEAD_CODE = {"rgb_sigma": 0, "rgb_sigma_mask": 1}


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def fmt_float(x):
    """Shortest decimal form that parses back to the same float64."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# Netpbm images (binary P6 / P5, 8-bit)

def write_ppm(path, image):
    """image: (H, W, 3) uint8."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"write_ppm needs (H, W, 3) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    atomic_write_bytes(path, b"P6\n%d %d\n255\n" % (w, h) + image.tobytes())


def write_pgm(path, image):
    """image: (H, W) uint8."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"write_pgm needs (H, W) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape
    atomic_write_bytes(path, b"P5\n%d %d\n255\n" % (w, h) + image.tobytes())


def _read_netpbm(path, magic):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(magic + b"\n"):
        raise ValueError(f"{path}: not a valid {magic.decode()} file")
    # Scan the three header fields positionally: pixel bytes may themselves
    # be whitespace, so the payload must never go through split().
    pos = len(magic)
    fields = []
    for _ in range(3):
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    try:
        w, h, maxval = (int(v) for v in fields)
    except ValueError as e:
        raise ValueError(f"{path}: malformed header") from e
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    payload = data[pos + 1 :]  # exactly one whitespace byte closes the header
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    if len(payload) < need:
        raise ValueError(f"{path}: truncated pixel data ({len(payload)} < {need})")
    arr = np.frombuffer(payload[:need], dtype=np.uint8).copy()
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def read_ppm(path):
    return _read_netpbm(path, b"P6")


def read_pgm(path):
    return _read_netpbm(path, b"P5")


# ---------------------------------------------------------------------------
# Datasets

@dataclass
class Dataset:
    """Posed frames of one kind.

    frames: list of (CameraFrame, image). rgb images are (H, W, 3) float32
    on the k/255 grid; mask images are (H, W) float32 whose nonzero values
    come from class_levels. binary_mask has class_levels == [1.0].
    """

    kind: str
    frames: list
    class_levels: list = dc_field(default_factory=list)

    def validate(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if not self.frames:
            raise ValueError("dataset has no frames")
        res = None
        for i, (cam, img) in enumerate(self.frames):
            intr = cam.intrinsics
            if res is None:
                res = (intr.width, intr.height)
            elif (intr.width, intr.height) != res:
                raise ValueError(
                    f"frame {i}: resolution {intr.width}x{intr.height} differs from {res[0]}x{res[1]}"
                )
            expect = (intr.height, intr.width, 3) if self.kind == "rgb" else (intr.height, intr.width)
            if img.shape != expect:
                raise ValueError(f"frame {i}: image shape {img.shape}, expected {expect}")
        if self.kind == "rgb":
            if self.class_levels:
                raise ValueError("rgb datasets must not declare class_levels")
        else:
            _validate_levels(self.class_levels)
            if self.kind == "binary_mask" and list(self.class_levels) != [1.0]:
                raise ValueError("binary_mask datasets must have class_levels == [1.0]")
            allowed = np.concatenate([[0.0], np.asarray(self.class_levels, dtype=np.float32)])
            for i, (_, img) in enumerate(self.frames):
                if not np.isin(img, allowed.astype(img.dtype)).all():
                    bad = img[~np.isin(img, allowed.astype(img.dtype))].flat[0]
                    raise ValueError(
                        f"frame {i}: mask value {bad} not in {{0}} union class_levels"
                    )
        return self

    def near_far(self):
        """The (near, far) shared by every frame; mixed values are an error."""
        pairs = {(c.intrinsics.near, c.intrinsics.far) for c, _ in self.frames}
        if len(pairs) != 1:
            raise ValueError(f"dataset mixes near/far ranges: {sorted(pairs)}")
        return pairs.pop()


def _validate_levels(levels):
    levels = [float(v) for v in levels]
    if not levels:
        raise ValueError("mask datasets need at least one class level")
    if any(not (0.0 < v <= 1.0) for v in levels):
        raise ValueError(f"class_levels must lie in (0, 1], got {levels}")
    if sorted(levels) != levels or len(set(levels)) != len(levels):
        raise ValueError(f"class_levels must be strictly increasing, got {levels}")
    bytes_ = [int(round(v * 255)) for v in levels]
    if 0 in bytes_ or len(set(bytes_)) != len(bytes_):
        raise ValueError(
            f"class_levels {levels} do not map to distinct nonzero bytes under round(v*255)"
        )
    return levels


def level_bytes(levels):
    return [int(round(float(v) * 255)) for v in levels]


def save_dataset(dataset, out_dir):
    """Write frames plus manifest.json into out_dir. Returns the manifest path."""
    dataset.validate()
    os.makedirs(out_dir, exist_ok=True)
    ext = "ppm" if dataset.kind == "rgb" else "pgm"
    entries = []
    for i, (cam, img) in enumerate(dataset.frames):
        name = f"frame_{i:04d}.{ext}"
        fpath = os.path.join(out_dir, name)
        if dataset.kind == "rgb":
            scaled = np.asarray(img, dtype=np.float64) * 255.0
            rounded = np.round(scaled)
            # float32 storage of k/255 lands within ~8e-6 of k after scaling;
            # genuinely off-grid values sit >= 0.5 away, so 1e-3 separates.
            if np.abs(scaled - rounded).max() > 1e-3:
                raise ValueError(
                    f"frame {i}: rgb values must lie on the k/255 grid to survive "
                    "an 8-bit round trip"
                )
            write_ppm(fpath, rounded.astype(np.uint8))
        else:
            lut = {0.0: 0}
            for lv, b in zip(dataset.class_levels, level_bytes(dataset.class_levels)):
                lut[float(np.float32(lv))] = b
            out = np.zeros(img.shape, dtype=np.uint8)
            for value, b in lut.items():
                out[img == np.float32(value)] = b
            write_pgm(fpath, out)
        intr = cam.intrinsics
        entries.append(
            {
                "file": name,
                "camera_to_world": [[float(v) for v in row] for row in cam.camera_to_world],
                "fx": intr.fx,
                "fy": intr.fy,
                "cx": intr.cx,
                "cy": intr.cy,
                "near": intr.near,
                "far": intr.far,
            }
        )
    w = dataset.frames[0][0].intrinsics.width
    h = dataset.frames[0][0].intrinsics.height
    manifest = {
        "kind": dataset.kind,
        "width": w,
        "height": h,
        "class_levels": [float(v) for v in dataset.class_levels],
        "frames": entries,
    }
    mpath = os.path.join(out_dir, "manifest.json")
    atomic_write_text(mpath, json.dumps(manifest, indent=2) + "\n")
    return mpath


def load_dataset(path):
    """Load a dataset directory (or a manifest.json path directly)."""
    path = os.fspath(path)
    mpath = path if path.endswith(".json") else os.path.join(path, "manifest.json")
    base = os.path.dirname(mpath)
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ValueError(f"{mpath}: malformed manifest: {e}") from e
    for key in ("kind", "width", "height", "class_levels", "frames"):
        if key not in manifest:
            raise ValueError(f"{mpath}: manifest missing key {key!r}")
    kind = manifest["kind"]
    if kind not in DATASET_KINDS:
        raise ValueError(f"{mpath}: unknown dataset kind {kind!r}")
    w, h = int(manifest["width"]), int(manifest["height"])
    levels = [float(v) for v in manifest["class_levels"]]
    if kind != "rgb":
        _validate_levels(levels)
    byte_to_level = {0: np.float32(0.0)}
    for lv, b in zip(levels, level_bytes(levels)):
        byte_to_level[b] = np.float32(lv)

    frames = []
    for i, entry in enumerate(manifest["frames"]):
        intr = Intrinsics(
            fx=float(entry["fx"]),
            fy=float(entry["fy"]),
            cx=float(entry["cx"]),
            cy=float(entry["cy"]),
            width=w,
            height=h,
            near=float(entry["near"]),
            far=float(entry["far"]),
        )
        cam = CameraFrame(np.array(entry["camera_to_world"], dtype=np.float64), intr)
        fpath = os.path.join(base, entry["file"])
        if kind == "rgb":
            raw = read_ppm(fpath)
            if raw.shape[:2] != (h, w):
                raise ValueError(f"{fpath}: resolution {raw.shape[1]}x{raw.shape[0]} != manifest {w}x{h}")
            img = (raw.astype(np.float32) / np.float32(255.0)).astype(np.float32)
        else:
            raw = read_pgm(fpath)
            if raw.shape != (h, w):
                raise ValueError(f"{fpath}: resolution {raw.shape[1]}x{raw.shape[0]} != manifest {w}x{h}")
            present = np.unique(raw)
            unknown = [int(b) for b in present if int(b) not in byte_to_level]
            if unknown:
                raise ValueError(
                    f"{fpath}: mask bytes {unknown} do not correspond to any class level"
                )
            lut = np.zeros(256, dtype=np.float32)
            for b, lv in byte_to_level.items():
                lut[b] = lv
            img = lut[raw]
        frames.append((cam, img))
    return Dataset(kind=kind, frames=frames, class_levels=levels).validate()


# ---------------------------------------------------------------------------
# Checkpoints

@dataclass
class Checkpoint:
    """Trained field snapshot: architecture, flat float32 params, provenance.

    stage tags which training produced it ("stage1_rgb", "stage2_mask",
    "joint"); near/far record the ray range the field was trained with so
    later stages can refuse mismatched sampling geometry.
    """

    config: FieldConfig
    params: np.ndarray
    stage: str
    near: float
    far: float

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        p = np.asarray(self.params, dtype=np.float32).ravel()
        n = param_count(self.config)
        if p.size != n:
            raise ValueError(f"params has {p.size} values, architecture needs {n}")
        if not (0.0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")
        object.__setattr__(self, "params", p)


def save_checkpoint(ckpt, path):
    cfg = ckpt.config
    header = CHECKPOINT_MAGIC + struct.pack(
        "<IBBIIIIddQ",
        CHECKPOINT_VERSION,
        _STAGE_CODE[ckpt.stage],
        _HEAD_CODE[cfg.head_type],
        cfg.pos_frequencies,
        cfg.dir_frequencies,
        cfg.trunk_depth,
        cfg.trunk_width,
        ckpt.near,
        ckpt.far,
        ckpt.params.size,
    )
    atomic_write_bytes(path, header + ckpt.params.astype("<f4").tobytes())


def load_checkpoint(path, expect_config=None):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(CHECKPOINT_MAGIC) or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    fmt = "<IBBIIIIddQ"
    size = struct.calcsize(fmt)
    if len(data) < off + size:
        raise ValueError(f"{path}: truncated checkpoint header")
    version, stage_c, head_c, lp, ld, depth, width, near, far, n = struct.unpack_from(fmt, data, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    stage = {v: k for k, v in _STAGE_CODE.items()}.get(stage_c)
    head = {v: k for k, v in _HEAD_CODE.items()}.get(head_c)
    if stage is None or head is None:
        raise ValueError(f"{path}: corrupt stage/head tags ({stage_c}, {head_c})")
    cfg = FieldConfig(
        pos_frequencies=lp,
        dir_frequencies=ld,
        trunk_depth=depth,
        trunk_width=width,
        head_type=head,
    )
    payload = data[off + size :]
    if len(payload) != 4 * n:
        raise ValueError(f"{path}: expected {4 * n} param bytes, found {len(payload)}")
    params = np.frombuffer(payload, dtype="<f4").copy()
    if expect_config is not None and cfg != expect_config:
        raise ValueError(
            f"{path}: checkpoint architecture {cfg} does not match expected {expect_config}"
        )
    return Checkpoint(config=cfg, params=params, stage=stage, near=near, far=far)


# ---------------------------------------------------------------------------
# Labeled point clouds (ASCII PLY)

@dataclass
class LabeledPointCloud:
    """Points with per-point color, class label, and cluster assignment.

    label 0 means unlabeled/foreground-generic, k >= 1 a fruit class.
    cluster_id -1 means unassigned/noise. source records which method
    produced the cloud: "invnerf", "sa3d", or "synthetic_gt".
    """

    points: np.ndarray
    colors: np.ndarray
    labels: np.ndarray
    cluster_ids: np.ndarray
    source: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        n = pts.shape[0]
        colors = np.asarray(self.colors, dtype=np.uint8).reshape(n, 3) if n else np.zeros((0, 3), np.uint8)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(n) if n else np.zeros(0, np.int64)
        cids = np.asarray(self.cluster_ids, dtype=np.int64).reshape(n) if n else np.zeros(0, np.int64)
        if self.source not in ("invnerf", "sa3d", "synthetic_gt"):
            raise ValueError(f"unknown point cloud source {self.source!r}")
        if np.any(labels < 0):
            raise ValueError("labels must be >= 0")
        if np.any(cids < -1):
            raise ValueError("cluster ids must be >= -1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "cluster_ids", cids)

    def __len__(self):
        return self.points.shape[0]

    def replace(self, **kw):
        args = dict(
            points=self.points,
            colors=self.colors,
            labels=self.labels,
            cluster_ids=self.cluster_ids,
            source=self.source,
        )
        args.update(kw)
        return LabeledPointCloud(**args)


def write_ply(cloud, path):
    n = len(cloud)
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment source {cloud.source}",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property int label",
        "property int cluster_id",
        "end_header",
    ]
    body = []
    for i in range(n):
        x, y, z = cloud.points[i]
        r, g, b = cloud.colors[i]
        body.append(
            f"{fmt_float(x)} {fmt_float(y)} {fmt_float(z)} "
            f"{r} {g} {b} {cloud.labels[i]} {cloud.cluster_ids[i]}"
        )
    atomic_write_text(path, "\n".join(lines + body) + "\n")


def read_ply(path):
    with open(path) as f:
        text = f.read()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    source = "synthetic_gt"
    props = []
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if line == "end_header":
            break
        if line.startswith("comment source "):
            source = line[len("comment source "):].strip()
        elif line.startswith("element vertex "):
            n = int(line.split()[-1])
        elif line.startswith("property"):
            props.append(line.split()[-1])
    else:
        raise ValueError(f"{path}: missing end_header")
    if n is None:
        raise ValueError(f"{path}: missing vertex element")
    expect = ["x", "y", "z", "red", "green", "blue", "label", "cluster_id"]
    if props != expect:
        raise ValueError(f"{path}: vertex properties {props}, expected {expect}")
    rows = lines[i : i + n]
    if len(rows) < n:
        raise ValueError(f"{path}: expected {n} vertex rows, found {len(rows)}")
    pts = np.zeros((n, 3), dtype=np.float32)
    colors = np.zeros((n, 3), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.int64)
    cids = np.zeros(n, dtype=np.int64)
    for j, row in enumerate(rows):
        f_ = row.split()
        if len(f_) != 8:
            raise ValueError(f"{path}: vertex row {j} has {len(f_)} fields, expected 8")
        pts[j] = [np.float32(float(v)) for v in f_[:3]]
        colors[j] = [int(v) for v in f_[3:6]]
        labels[j] = int(f_[6])
        cids[j] = int(f_[7])
    return LabeledPointCloud(points=pts, colors=colors, labels=labels, cluster_ids=cids, source=source)


# ---------------------------------------------------------------------------
# CSV

def write_csv(path, header, rows):
    """Plain comma-joined CSV; floats via repr, everything else via str."""
    def cell(v):
        if isinstance(v, (float, np.floating)):
            return fmt_float(v)
        return str(v)

    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(cell(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
