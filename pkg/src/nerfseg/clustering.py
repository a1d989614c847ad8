"""Fruit counting: point cloud cleanup, DBSCAN, and cluster repair.

The raw extracted cloud goes through statistical outlier removal, voxel
downsampling, density clustering, then two repair passes: merge_small folds
fragments into their nearest cluster, split_large re-cuts clusters that
swallowed several fruits using Ward agglomeration. The fruit count is the
number of surviving clusters.

All algorithms here are deterministic: neighbor lists are sorted, ties
resolve to the smallest index, and cluster ids follow discovery order.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class ClusterConfig:
    voxel_leaf: float = 0.03
    dbscan_eps: float = None  # resolved to 1.5 * voxel_leaf when omitted
    min_pts: int = 8
    outlier_k: int = 16
    outlier_std_ratio: float = 2.0
    merge_fraction: float = 0.25
    split_trigger: float = 1.6

    def __post_init__(self):
        if self.dbscan_eps is None:
            object.__setattr__(self, "dbscan_eps", 1.5 * self.voxel_leaf)
        errs = []
        if self.voxel_leaf <= 0:
            errs.append(f"voxel_leaf must be positive, got {self.voxel_leaf}")
        if self.dbscan_eps <= 0:
            errs.append(f"dbscan_eps must be positive, got {self.dbscan_eps}")
        if self.min_pts < 1:
            errs.append(f"min_pts must be >= 1, got {self.min_pts}")
        if self.outlier_k < 1:
            errs.append(f"outlier_k must be >= 1, got {self.outlier_k}")
        if self.outlier_std_ratio <= 0:
            errs.append("outlier_std_ratio must be positive")
        if not (0.0 < self.merge_fraction < 1.0):
            errs.append(f"merge_fraction must lie in (0, 1), got {self.merge_fraction}")
        if self.split_trigger <= 1.0:
            errs.append(f"split_trigger must exceed 1, got {self.split_trigger}")
        if errs:
            raise ValueError("invalid cluster config: " + "; ".join(errs))


def remove_outliers(points, config):
    """Statistical outlier removal.

    A point whose mean distance to its outlier_k nearest neighbors exceeds
    mean + outlier_std_ratio * std (over all points) is dropped. With
    outlier_k or fewer points the input passes through untouched, and the
    filter never removes every point. Returns (points, kept_indices).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n <= config.outlier_k:
        return points.copy(), np.arange(n)
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=config.outlier_k + 1)
    mean_d = dist[:, 1:].mean(axis=1)  # skip the self column
    thr = mean_d.mean() + config.outlier_std_ratio * mean_d.std()
    keep = np.nonzero(mean_d <= thr)[0]
    if keep.size == 0:
        keep = np.array([int(np.argmin(mean_d))])
    return points[keep].copy(), keep


def voxel_downsample(points, leaf, origin=(0.0, 0.0, 0.0)):
    """Replace each occupied voxel by the centroid of its points.

    Output is ordered by lexicographically sorted voxel key, so it depends
    only on the point set, not its ordering.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if leaf <= 0:
        raise ValueError(f"leaf must be positive, got {leaf}")
    if points.shape[0] == 0:
        return points.copy()
    keys = np.floor((points - np.asarray(origin)) / leaf).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    sp = points[order]
    boundary = np.ones(order.shape[0], dtype=bool)
    boundary[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    starts = np.nonzero(boundary)[0]
    ends = np.append(starts[1:], order.shape[0])
    sums = np.add.reduceat(sp, starts, axis=0)
    counts = (ends - starts).astype(np.float64)
    return sums / counts[:, None]


def dbscan(points, eps, min_pts):
    """Density clustering. Returns labels: -1 noise, else 0..C-1.

    A point is core when it has at least min_pts neighbors within eps,
    counting itself. Clusters are grown breadth-first from core points in
    ascending index order, so ids follow discovery order and border points
    attach to the first core point that reaches them.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    labels = np.full(n, -2, dtype=np.int64)  # -2 = unvisited
    if n == 0:
        return labels + 0
    tree = cKDTree(points)
    neigh = tree.query_ball_point(points, r=eps)
    neigh = [sorted(nb) for nb in neigh]
    core = np.array([len(nb) >= min_pts for nb in neigh])

    cid = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        if not core[i]:
            labels[i] = -1
            continue
        labels[i] = cid
        queue = deque(neigh[i])
        while queue:
            j = queue.popleft()
            if labels[j] == -1:
                labels[j] = cid  # noise captured as border
            if labels[j] != -2:
                continue
            labels[j] = cid
            if core[j]:
                queue.extend(neigh[j])
        cid += 1
    return labels


def _cluster_stats(points, labels):
    ids = np.unique(labels[labels >= 0])
    sizes = {int(c): int((labels == c).sum()) for c in ids}
    cents = {int(c): points[labels == c].mean(axis=0) for c in ids}
    return ids, sizes, cents


def merge_small(points, labels, config):
    """Fold undersized clusters into their nearest neighbor cluster.

    A cluster smaller than merge_fraction * median size (median over all
    pre-merge clusters) is relabeled to the cluster with the nearest
    pre-merge centroid, provided that centroid lies within 2 * dbscan_eps;
    otherwise its points become noise. All decisions use pre-merge sizes
    and centroids; chains of merges resolve transitively.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int64).copy()
    ids, sizes, cents = _cluster_stats(points, labels)
    if ids.size <= 1:
        return labels
    median = float(np.median([sizes[int(c)] for c in ids]))
    small = [int(c) for c in ids if sizes[int(c)] < config.merge_fraction * median]
    if not small:
        return labels

    mapping = {}
    limit = 2.0 * config.dbscan_eps
    for c in small:
        others = [o for o in ids if o != c]
        dists = [(float(np.linalg.norm(cents[c] - cents[int(o)])), int(o)) for o in others]
        dist, target = min(dists)
        mapping[c] = int(target) if dist <= limit else -1

    def resolve(c):
        seen = [c]
        cur = c
        while cur in mapping:
            cur = mapping[cur]
            if cur == -1:
                return -1
            if cur in seen:
                return min(seen[seen.index(cur):])
            seen.append(cur)
        return cur

    for c in small:
        labels[labels == c] = resolve(c)
    return labels


def agglomerative(points, n_clusters):
    """Ward agglomeration down to n_clusters. Returns labels 0..n_clusters-1.

    Greedy merging of the cluster pair with the smallest variance increase
      cost(a, b) = |a| * |b| / (|a| + |b|) * ||centroid_a - centroid_b||^2
    with exact ties broken toward the smallest index pair. Output labels are
    numbered by each final cluster's smallest point index.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if not (1 <= n_clusters <= n):
        raise ValueError(f"n_clusters must be in [1, {n}], got {n_clusters}")
    rep = np.arange(n)  # cluster representative per point
    size = np.ones(n)
    cent = points.copy()
    active = np.ones(n, dtype=bool)

    diff = cent[:, None, :] - cent[None, :, :]
    cost = 0.5 * np.einsum("ijk,ijk->ij", diff, diff)  # sizes 1: s*s/(s+s) = 1/2
    np.fill_diagonal(cost, np.inf)

    n_active = n
    while n_active > n_clusters:
        flat = np.argmin(cost)  # first minimum in row-major order: smallest (i, j)
        i, j = divmod(int(flat), n)
        if i > j:
            i, j = j, i
        rep[rep == j] = i
        si, sj = size[i], size[j]
        cent[i] = (si * cent[i] + sj * cent[j]) / (si + sj)
        size[i] = si + sj
        active[j] = False
        cost[j, :] = np.inf
        cost[:, j] = np.inf
        idx = np.nonzero(active)[0]
        others = idx[idx != i]
        if others.size:
            d = cent[others] - cent[i]
            c = (size[others] * size[i] / (size[others] + size[i])) * np.einsum(
                "ij,ij->i", d, d
            )
            cost[i, others] = c
            cost[others, i] = c
        n_active -= 1

    out = np.empty(n, dtype=np.int64)
    next_label = 0
    seen = {}
    for p in range(n):
        r = rep[p]
        if r not in seen:
            seen[r] = next_label
            next_label += 1
        out[p] = seen[r]
    return out


def split_large(points, labels, config):
    """Re-cut clusters that look like several fruits fused together.

    A cluster larger than split_trigger * median size is split into
    clamp(round(size / median), 2, 4) Ward sub-clusters. Sub-clusters get
    fresh ids above the current maximum, assigned in (cluster id, sub-label)
    order; the original id is retired.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int64).copy()
    ids, sizes, _ = _cluster_stats(points, labels)
    if ids.size == 0:
        return labels
    median = float(np.median([sizes[int(c)] for c in ids]))
    if median <= 0:
        return labels
    next_id = int(ids.max()) + 1
    for c in (int(v) for v in ids):
        if sizes[c] <= config.split_trigger * median:
            continue
        n_sub = int(np.floor(sizes[c] / median + 0.5))
        n_sub = min(max(n_sub, 2), 4)
        members = np.nonzero(labels == c)[0]
        sub = agglomerative(points[members], n_sub)
        labels[members] = next_id + sub
        next_id += n_sub
    return labels


def compact_labels(labels):
    """Renumber cluster ids to 0..C-1 by order of first appearance."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full_like(labels, -1)
    seen = {}
    for i, v in enumerate(labels):
        if v < 0:
            continue
        if v not in seen:
            seen[v] = len(seen)
        out[i] = seen[v]
    return out


@dataclass
class CountReport:
    predicted_count: int
    ground_truth_count: int | None
    cluster_sizes: list
    centroids: np.ndarray

    def rows(self):
        """CSV rows: one per cluster, then total / ground truth summaries."""
        rows = []
        for cid, (size, cent) in enumerate(zip(self.cluster_sizes, self.centroids)):
            rows.append(("cluster", cid, size, cent[0], cent[1], cent[2]))
        rows.append(("total", "", self.predicted_count, "", "", ""))
        if self.ground_truth_count is not None:
            rows.append(("ground_truth", "", self.ground_truth_count, "", "", ""))
        return rows


def count(cluster_ids, points=None, ground_truth_count=None):
    """Count distinct non-noise clusters; sizes/centroids per compact id."""
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
    compact = compact_labels(cluster_ids)
    c = int(compact.max()) + 1 if compact.size and compact.max() >= 0 else 0
    sizes = [int((compact == k).sum()) for k in range(c)]
    if points is not None and c:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cents = np.stack([points[compact == k].mean(axis=0) for k in range(c)])
    else:
        cents = np.zeros((c, 3))
    return CountReport(
        predicted_count=c,
        ground_truth_count=ground_truth_count,
        cluster_sizes=sizes,
        centroids=cents,
    )


_PALETTE = np.array(
    [
        (228, 26, 28), (55, 126, 184), (77, 175, 74), (152, 78, 163),
        (255, 127, 0), (255, 255, 51), (166, 86, 40), (247, 129, 191),
        (153, 153, 153), (66, 206, 227), (251, 154, 153), (178, 223, 138),
    ],
    dtype=np.uint8,
)


def cluster_pipeline(cloud, config, ground_truth_count=None):
    """Full counting pass over a labeled cloud.

    Points are processed per class label (all together when unlabeled):
    outlier removal, voxel downsample, dbscan, merge_small, split_large.
    Returns (clustered_cloud, CountReport); the cloud holds the downsampled
    points with compact global cluster ids and palette colors, noise gray.
    """
    from .dataio import LabeledPointCloud

    present = sorted(set(int(v) for v in cloud.labels)) if len(cloud) else [0]
    groups = present if present else [0]
    pts_out, lab_out, cid_out = [], [], []
    next_cluster = 0
    for g in groups:
        pts = cloud.points[cloud.labels == g]
        if pts.shape[0] == 0:
            continue
        pts, _ = remove_outliers(pts, config)
        pts = voxel_downsample(pts, config.voxel_leaf)
        ids = dbscan(pts, config.dbscan_eps, config.min_pts)
        ids = merge_small(pts, ids, config)
        ids = split_large(pts, ids, config)
        ids = compact_labels(ids)
        ids = np.where(ids >= 0, ids + next_cluster, -1)
        if ids.size:
            next_cluster = max(next_cluster, int(ids.max()) + 1)
        pts_out.append(pts)
        lab_out.append(np.full(pts.shape[0], g, dtype=np.int64))
        cid_out.append(ids)

    if pts_out:
        pts = np.concatenate(pts_out)
        labs = np.concatenate(lab_out)
        cids = np.concatenate(cid_out)
    else:
        pts = np.zeros((0, 3))
        labs = np.zeros(0, dtype=np.int64)
        cids = np.zeros(0, dtype=np.int64)

    colors = np.full((pts.shape[0], 3), 120, dtype=np.uint8)
    assigned = cids >= 0
    if np.any(assigned):
        colors[assigned] = _PALETTE[cids[assigned] % len(_PALETTE)]
    out_cloud = LabeledPointCloud(
        points=pts.astype(np.float32),
        colors=colors,
        labels=labs,
        cluster_ids=cids,
        source=cloud.source,
    )
    report = count(cids, pts, ground_truth_count)
    return out_cloud, report
