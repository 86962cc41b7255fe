"""Closed-form cap pose from implicit encodings, plus an ICP baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DegenerateGeometryError, RotXY, rot_from_axis, rot_matrix

log = logging.getLogger(__name__)

Z_RATIO = 2.0 / 3.0


@dataclass
class PoseEstimate:
    center: np.ndarray
    rot: RotXY
    scale_s: float
    scale_z: float
    lam: np.ndarray
    confidence: float
    n_points: int
    flags: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return "degenerate" not in self.flags


class OrientationFit(NamedTuple):
    lam: np.ndarray
    rot: RotXY
    s_z_raw: float
    flags: tuple


def robust_center(points, residuals) -> np.ndarray:
    """Componentwise median of the collapsed points ``p + residual``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("robust_center needs at least one point")
    return np.median(pts + np.asarray(residuals, dtype=float).reshape(-1, 3), axis=0)


def solve_orientation(points, y_o, center) -> OrientationFit:
    """Least-squares cap axis from per-point normalised heights.

    Solves ``(P - c) @ lam = y_o``; ``1/|lam|`` is the cap height and
    ``lam/|lam|`` the axis, from which the two tilt angles follow with
    non-negative cosines.
    """
    a = np.asarray(points, dtype=float).reshape(-1, 3) - np.asarray(center, dtype=float)
    y = np.asarray(y_o, dtype=float).reshape(-1)
    if len(a) < 4:
        raise DegenerateGeometryError("orientation fit needs at least 4 points")
    gram = a.T @ a
    if not np.isfinite(np.linalg.cond(gram)) or np.linalg.cond(gram) > 1e12:
        raise DegenerateGeometryError("design matrix is rank deficient")
    lam = np.linalg.solve(gram, a.T @ y)
    norm = float(np.linalg.norm(lam))
    if norm < 1e-9:
        raise DegenerateGeometryError("orientation solution vanished")
    s_z_raw = 1.0 / norm
    unit = lam * s_z_raw
    flags = []
    l1 = unit[0]
    if abs(l1) >= 1 - 1e-9:
        flags.append("clamped")
        l1 = math.copysign(1 - 1e-9, l1)
    if unit[2] < 0:
        flags.append("axis_below_horizon")
    sin_y = -l1
    sin_x = float(np.clip(unit[1] / math.sqrt(1.0 - l1 * l1), -1.0, 1.0))
    return OrientationFit(lam, RotXY(math.asin(sin_x), math.asin(sin_y)), s_z_raw, tuple(flags))


def refit_scale(points, center, rot: RotXY) -> float:
    """Single scale of the 2/3-proportioned ellipsoid through the points."""
    q = (np.asarray(points, dtype=float).reshape(-1, 3) - np.asarray(center, dtype=float)) @ rot_matrix(rot).T
    a = q[:, 0] ** 2 + q[:, 1] ** 2 + (q[:, 2] / Z_RATIO) ** 2
    denom = float(np.sum(a * a))
    if denom == 0.0:
        raise DegenerateGeometryError("all points sit on the center")
    return 1.0 / math.sqrt(float(np.sum(a)) / denom)


def _mad_inliers(collapsed: np.ndarray, center: np.ndarray, k: float = 3.0) -> np.ndarray:
    d = np.linalg.norm(collapsed - center, axis=1)
    # exact residuals give zero spread; the floor still rejects strays
    return d <= max(k * 1.4826 * float(np.median(d)), 1e-9)


def estimate_one(points, enc_residual, enc_orientation, existence, outlier_filter: bool = False) -> PoseEstimate:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    res = np.asarray(enc_residual, dtype=float).reshape(-1, 3)
    yo = np.asarray(enc_orientation, dtype=float).reshape(-1)
    conf = float(np.mean(existence)) if len(pts) else 0.0
    center = robust_center(pts, res)
    if outlier_filter:
        keep = _mad_inliers(pts + res, center)
        pts, res, yo = pts[keep], res[keep], yo[keep]
        center = robust_center(pts, res)
    try:
        fit = solve_orientation(pts, yo, center)
        s = refit_scale(pts, center, fit.rot)
    except DegenerateGeometryError as exc:
        log.info("degenerate instance (%d points): %s", len(pts), exc)
        return PoseEstimate(center, RotXY(), float("nan"), float("nan"), np.full(3, np.nan), conf,
                            len(pts), ("degenerate",))
    return PoseEstimate(center, fit.rot, s, Z_RATIO * s, fit.lam, conf, len(pts), fit.flags,
                        {"s_z_raw": fit.s_z_raw})


def estimate_pose(cloud, enc, seg, outlier_filter: bool = False) -> list:
    """One pose per segmented instance, in instance-id order."""
    points = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=float)
    poses = []
    for k in range(seg.n_instances):
        idx = seg.members(k)
        poses.append(estimate_one(points[idx], enc.residual[idx], enc.orientation[idx],
                                  enc.existence[idx], outlier_filter))
    return poses


# ---------------------------------------------------------------------------
# ICP


def best_rigid(src: np.ndarray, dst: np.ndarray):
    """Rotation and translation minimising ``|R @ src + t - dst|`` (SVD method)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, cd - rot @ cs


def template_cap_samples(template, n: int = 2000, seed: int = 0) -> np.ndarray:
    return template.cap.sample(n, np.random.default_rng(seed))


def icp_refine(points, init: PoseEstimate, template, max_iter: int = 50, tol: float = 1e-8,
               n_samples: int = 2000, seed: int = 0) -> PoseEstimate:
    """Point-to-point ICP of the scaled template cap onto the instance points.

    Starts at ``init``; the z spin of the result is discarded and the scale is
    kept. ``diagnostics`` holds the final RMS and iteration count.
    """
    target = np.asarray(points, dtype=float).reshape(-1, 3)
    tree = cKDTree(target)
    canon = template_cap_samples(template, n_samples, seed) * init.scale_s
    basis = rot_matrix(init.rot).T
    trans = np.asarray(init.center, dtype=float).copy()
    src = canon @ basis.T + trans
    dist, nn = tree.query(src)
    rms = float(np.sqrt(np.mean(dist ** 2)))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r, t = best_rigid(src, target[nn])
        basis = r @ basis
        trans = r @ trans + t
        src = canon @ basis.T + trans
        dist, nn = tree.query(src)
        new_rms = float(np.sqrt(np.mean(dist ** 2)))
        if abs(rms - new_rms) < tol:
            rms = new_rms
            converged = True
            break
        rms = new_rms
    axis = basis[:, 2]
    flags = list(init.flags)
    if axis[2] < 0:
        flags.append("axis_below_horizon")
        axis = -axis
    if not converged:
        flags.append("icp_not_converged")
    rot = rot_from_axis(axis)
    diag = dict(init.diagnostics)
    diag.update(icp_rms=rms, icp_iterations=it)
    return PoseEstimate(trans, rot, init.scale_s, init.scale_z, rot_matrix(rot)[2] / init.scale_z,
                        init.confidence, len(target), tuple(flags), diag)
