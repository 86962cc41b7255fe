"""Per-point implicit pose encoding, its training losses and a noise oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import rot_matrix


@dataclass
class ImplicitEncoding:
    existence: np.ndarray
    residual: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        self.existence = np.asarray(self.existence, dtype=float).reshape(-1)
        self.residual = np.asarray(self.residual, dtype=float).reshape(-1, 3)
        self.orientation = np.asarray(self.orientation, dtype=float).reshape(-1)
        n = len(self.existence)
        if len(self.residual) != n or len(self.orientation) != n:
            raise ValueError("encoding arrays differ in length")

    def __len__(self) -> int:
        return len(self.existence)

    def copy(self) -> "ImplicitEncoding":
        return ImplicitEncoding(self.existence.copy(), self.residual.copy(), self.orientation.copy())


@dataclass(frozen=True)
class NoiseSpec:
    sigma_residual: float = 0.0
    sigma_orientation: float = 0.0
    flip_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_residual < 0 or self.sigma_orientation < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.flip_prob < 0.5:
            raise ValueError("flip_prob must lie in [0, 0.5)")


def encode_gt(cloud, ann) -> ImplicitEncoding:
    """Training targets from the gap-relabeled annotation.

    Foreground points carry ``c - p`` and their normalised height in the cap
    frame, clamped to [0, 1]; everything else is zero.
    """
    points = cloud.points
    n = len(points)
    existence = np.zeros(n)
    residual = np.zeros((n, 3))
    orientation = np.zeros(n)
    labels = ann.seg_label
    for m in ann.mushrooms:
        idx = np.flatnonzero(labels == m.id)
        if len(idx) == 0:
            continue
        c = np.asarray(m.center, dtype=float)
        existence[idx] = 1.0
        residual[idx] = c - points[idx]
        height = (points[idx] - c) @ rot_matrix(m.rot)[2]
        orientation[idx] = np.clip(height / m.scale_z, 0.0, 1.0)
    return ImplicitEncoding(existence, residual, orientation)


def perturb(enc: ImplicitEncoding, spec: NoiseSpec) -> ImplicitEncoding:
    """Simulate an imperfect predictor.

    Mushroom points get Gaussian residual and orientation noise; each
    point's existence flips with probability ``flip_prob`` (to 0.1 or 0.9).
    """
    rng = np.random.default_rng(spec.seed)
    n = len(enc)
    out = enc.copy()
    fg = enc.existence >= 0.5
    res_noise = rng.normal(0.0, 1.0, size=(n, 3)) * spec.sigma_residual
    ori_noise = rng.normal(0.0, 1.0, size=n) * spec.sigma_orientation
    flips = rng.random(n) < spec.flip_prob
    out.residual[fg] += res_noise[fg]
    out.orientation[fg] = np.clip(out.orientation[fg] + ori_noise[fg], 0.0, 1.0)
    out.existence[flips & fg] = 0.1
    out.existence[flips & ~fg] = 0.9
    return out


def _check(pred: ImplicitEncoding, gt: ImplicitEncoding):
    if len(pred) != len(gt):
        raise ValueError(f"prediction has {len(pred)} points, target has {len(gt)}")


def existence_loss(pred: ImplicitEncoding, gt: ImplicitEncoding) -> float:
    """Mean binary cross entropy."""
    _check(pred, gt)
    y = np.clip(pred.existence, 1e-7, 1 - 1e-7)
    t = gt.existence
    return float(np.mean(-(t * np.log(y) + (1 - t) * np.log(1 - y))))


def _masked_mse(err_fg: np.ndarray, err_bg: np.ndarray) -> float:
    total = 0.0
    if len(err_fg):
        total += float(np.mean(err_fg))
    if len(err_bg):
        total += float(np.mean(err_bg))
    return total


def center_loss(pred: ImplicitEncoding, gt: ImplicitEncoding, weight: float = 100.0) -> float:
    """Weighted residual MSE; background residuals are pulled to zero."""
    _check(pred, gt)
    fg = gt.existence >= 0.5
    err_fg = np.sum((pred.residual[fg] - gt.residual[fg]) ** 2, axis=1)
    err_bg = np.sum(pred.residual[~fg] ** 2, axis=1)
    return weight * _masked_mse(err_fg, err_bg)


def orientation_loss(pred: ImplicitEncoding, gt: ImplicitEncoding) -> float:
    _check(pred, gt)
    fg = gt.existence >= 0.5
    return _masked_mse((pred.orientation[fg] - gt.orientation[fg]) ** 2, pred.orientation[~fg] ** 2)


def total_loss(pred: ImplicitEncoding, gt: ImplicitEncoding) -> float:
    return existence_loss(pred, gt) + center_loss(pred, gt) + orientation_loss(pred, gt)
