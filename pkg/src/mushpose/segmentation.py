"""Instance separation by density clustering or mode seeking."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import voxel_cells


@dataclass
class Segmentation:
    instance_id: np.ndarray
    n_instances: int

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.instance_id == k)

    @classmethod
    def from_labels(cls, labels, min_size: int = 1) -> "Segmentation":
        """Contiguous ids ordered by descending size; small groups become background."""
        labels = np.asarray(labels, dtype=np.int64)
        out = np.full(len(labels), -1, dtype=np.int64)
        ids, first, counts = np.unique(labels[labels >= 0], return_index=True, return_counts=True)
        keep = counts >= min_size
        ids, first, counts = ids[keep], first[keep], counts[keep]
        order = np.lexsort((first, -counts))
        for new, old in enumerate(ids[order]):
            out[labels == old] = new
        return cls(out, len(ids))


def gap_relabel_labels(points, labels, centers, active=None, ratio: float = 0.25) -> np.ndarray:
    """Clear labels of points about equally far from their two nearest centers.

    A labeled point is sent to background when ``|1 - d1/d2| < ratio`` with
    ``d1 <= d2`` the distances to the two closest (active) centers.
    """
    labels = np.asarray(labels, dtype=np.int64)
    out = labels.copy()
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    if active is not None:
        centers = centers[np.asarray(active, dtype=bool)]
    fg = np.flatnonzero(labels >= 0)
    if len(centers) < 2 or len(fg) == 0:
        return out
    d = np.linalg.norm(np.asarray(points, dtype=float)[fg, None, :] - centers[None, :, :], axis=2)
    two = np.partition(d, 1, axis=1)[:, :2]
    d1, d2 = two[:, 0], two[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(d2 > 0, d1 / d2, 1.0)
    out[fg[np.abs(1.0 - q) < ratio]] = -1
    return out


def gap_relabel(cloud, ann, ratio: float = 0.25) -> np.ndarray:
    return gap_relabel_labels(cloud.points, ann.point_label, ann.centers(), ratio=ratio)


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Classic DBSCAN; neighbourhoods are inclusive and count the point itself.

    Clusters grow from core points in index order, so a border point reachable
    from several clusters joins the one started first.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be positive and min_pts >= 1")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    neighbours = cKDTree(pts).query_ball_point(pts, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbours])
    cluster = 0
    for i in range(n):
        if not core[i] or labels[i] >= 0:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for k in sorted(neighbours[j]):
                if labels[k] >= 0:
                    continue
                labels[k] = cluster
                if core[k]:
                    queue.append(k)
        cluster += 1
    return labels


def meanshift(points, bandwidth: float, max_iter: int = 300, tol: float = 1e-6):
    """Flat-kernel mean shift seeded from a bandwidth-sized grid.

    Returns ``(labels, modes)``; modes within ``bandwidth / 2`` merge into
    the one with more support, and every point takes its nearest mode.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    tree = cKDTree(pts)
    _, inverse = voxel_cells(pts, bandwidth)
    n_cells = inverse.max() + 1
    counts = np.bincount(inverse, minlength=n_cells)
    seeds = np.stack([np.bincount(inverse, weights=pts[:, k], minlength=n_cells) for k in range(3)],
                     axis=1) / counts[:, None]

    modes = seeds.copy()
    active = np.arange(len(modes))
    for _ in range(max_iter):
        if len(active) == 0:
            break
        hoods = tree.query_ball_point(modes[active], bandwidth)
        still = []
        for slot, idx in enumerate(hoods):
            if not idx:
                continue
            new = pts[idx].mean(axis=0)
            k = active[slot]
            if np.linalg.norm(new - modes[k]) >= tol:
                still.append(k)
            modes[k] = new
        active = np.array(still, dtype=np.int64)

    support = np.array([len(h) for h in tree.query_ball_point(modes, bandwidth)])
    order = np.lexsort((np.arange(len(modes)), -support))
    mode_tree = cKDTree(modes)
    suppressed = np.zeros(len(modes), dtype=bool)
    kept = []
    for k in order:
        if suppressed[k]:
            continue
        kept.append(k)
        suppressed[mode_tree.query_ball_point(modes[k], bandwidth / 2)] = True
    final = modes[kept]
    _, labels = cKDTree(final).query(pts, k=1)
    return labels.astype(np.int64), final


def segment(cloud, enc, method: str = "meanshift", bandwidth: float = 0.3, eps: float = 0.2,
            min_pts: int = 8, min_cluster_size: int = 20, existence_threshold: float = 0.5,
            max_iter: int = 300, tol: float = 1e-6) -> Segmentation:
    """Turn per-point encodings into instance ids (-1 = background)."""
    points = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=float)
    if len(enc.existence) != len(points):
        raise ValueError("encoding and cloud lengths differ")
    fg = np.flatnonzero(enc.existence >= existence_threshold)
    labels = np.full(len(points), -1, dtype=np.int64)
    if len(fg) == 0:
        return Segmentation(labels, 0)
    if method == "dbscan":
        sub = dbscan(points[fg], eps, min_pts)
    elif method == "meanshift":
        collapsed = points[fg] + enc.residual[fg]
        sub, _ = meanshift(collapsed, bandwidth, max_iter=max_iter, tol=tol)
    else:
        raise ValueError(f"unknown clustering method {method!r}")
    labels[fg] = sub
    return Segmentation.from_labels(labels, min_cluster_size)
