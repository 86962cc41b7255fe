"""Detection matching, MAP over oriented-box IoU, scale and axis errors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import OrientedBox, obb_iou, rot_matrix


@dataclass
class DetectionMatch:
    pred_id: Optional[int]
    gt_id: Optional[int]
    iou: float
    confidence: float


@dataclass
class EvalReport:
    map_per_threshold: dict
    mean_scale_rel_err: Optional[float]
    mean_cosine_sim: Optional[float]
    mean_theta_err_deg: Optional[float]
    n_gt: int
    n_pred: int
    n_matched: int
    error_threshold: float = 0.25
    table: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "map_per_threshold": {f"{k:g}": v for k, v in self.map_per_threshold.items()},
            "mean_scale_rel_err": self.mean_scale_rel_err,
            "mean_cosine_sim": self.mean_cosine_sim,
            "mean_theta_err_deg": self.mean_theta_err_deg,
            "n_gt": self.n_gt,
            "n_pred": self.n_pred,
            "n_matched": self.n_matched,
            "error_threshold": self.error_threshold,
            "table": self.table,
        }

    def format_table(self) -> str:
        def fmt(v, spec):
            return "absent" if v is None else format(v, spec)

        lines = ["metric                  value", "----------------------  ----------"]
        for thr, ap in self.map_per_threshold.items():
            lines.append(f"MAP@{thr:<19g} {ap:.4f}")
        lines.append(f"scale relative error    {fmt(self.mean_scale_rel_err, '.4f')}")
        lines.append(f"cosine similarity       {fmt(self.mean_cosine_sim, '.4f')}")
        lines.append(f"theta error (deg)       {fmt(self.mean_theta_err_deg, '.3f')}")
        lines.append(f"gt / pred / matched     {self.n_gt} / {self.n_pred} / {self.n_matched}")
        return "\n".join(lines)


def pred_to_obb(pose) -> OrientedBox:
    """Box of the constrained cap: base at the pose center, height ``scale_z``."""
    center = np.asarray(pose.center, dtype=float) + rot_matrix(pose.rot)[2] * (pose.scale_z / 2)
    return OrientedBox(center, pose.rot, (pose.scale_s, pose.scale_s, pose.scale_z / 2))


def iou_matrix(pred_boxes, gt_boxes, samples: int = 20000, seed: int = 0) -> np.ndarray:
    out = np.zeros((len(pred_boxes), len(gt_boxes)))
    for i, p in enumerate(pred_boxes):
        for j, g in enumerate(gt_boxes):
            out[i, j] = obb_iou(p, g, samples, seed)
    return out


def match_detections(preds, gts, iou_threshold: float, ious: Optional[np.ndarray] = None,
                     samples: int = 20000, seed: int = 0) -> list:
    """Greedy matching by descending confidence.

    ``preds`` is a list of ``(box, confidence)``; each prediction takes the
    unmatched ground truth with highest IoU at or above the threshold.
    Unmatched ground truths are listed last with ``pred_id=None``.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if ious is None:
        ious = iou_matrix([b for b, _ in preds], gts, samples, seed)
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    taken = set()
    out = []
    for i in order:
        best, best_iou = None, iou_threshold
        for j in range(len(gts)):
            if j in taken:
                continue
            if ious[i, j] >= best_iou and (best is None or ious[i, j] > best_iou):
                best, best_iou = j, ious[i, j]
        if best is None:
            top = float(ious[i].max()) if len(gts) else 0.0
            out.append(DetectionMatch(i, None, top, float(preds[i][1])))
        else:
            taken.add(best)
            out.append(DetectionMatch(i, best, float(best_iou), float(preds[i][1])))
    for j in range(len(gts)):
        if j not in taken:
            out.append(DetectionMatch(None, j, 0.0, 0.0))
    return out


def average_precision(matches, n_gt_total: int) -> float:
    """All-point interpolated AP over pooled detections."""
    if n_gt_total < 1:
        raise ValueError("need at least one ground-truth object")
    dets = [m for m in matches if m.pred_id is not None]
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    tp = np.array([dets[i].gt_id is not None for i in order], dtype=float)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt_total
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def scale_error(pred, gt) -> float:
    """``|s_pred - s_gt| / s_pred`` (normalised by the prediction)."""
    if not pred.scale_s > 0:
        raise ValueError("predicted scale must be positive")
    return abs(pred.scale_s - gt.scale_s) / pred.scale_s


def orientation_error(pred, gt):
    """Cosine between cap axes and the matching angle in degrees."""
    cos = float(np.clip(rot_matrix(pred.rot)[2] @ rot_matrix(gt.rot)[2], -1.0, 1.0))
    return cos, math.degrees(math.acos(cos))


def evaluate(scenes, thresholds=(0.25, 0.5), error_threshold: float = 0.25, per_scene: bool = False,
             samples: int = 20000, seed: int = 0) -> EvalReport:
    """Score ``[(annotation, poses), ...]``.

    Poses flagged degenerate are ignored. Errors are averaged over detections
    matched at ``error_threshold``; with nothing matched they are ``None``.
    """
    thresholds = sorted({float(t) for t in thresholds})
    if not thresholds:
        raise ValueError("no IoU thresholds given")
    levels = sorted(set(thresholds) | {float(error_threshold)})
    pooled = {t: [] for t in levels}
    per_scene_ap = {t: [] for t in levels}
    table = []
    n_gt = n_pred = 0
    scale_errs, cosines, thetas = [], [], []
    for s_idx, (ann, poses) in enumerate(scenes):
        poses = [p for p in poses if p.ok]
        gts = ann.mushrooms
        pred_boxes = [pred_to_obb(p) for p in poses]
        ious = iou_matrix(pred_boxes, [g.obb for g in gts], samples, seed)
        preds = [(b, p.confidence) for b, p in zip(pred_boxes, poses)]
        n_gt += len(gts)
        n_pred += len(poses)
        for t in levels:
            matches = match_detections(preds, [g.obb for g in gts], t, ious)
            pooled[t].extend(matches)
            if per_scene and gts:
                per_scene_ap[t].append(average_precision(matches, len(gts)))
            if t == error_threshold:
                for m in matches:
                    row = {"scene": s_idx, "pred_id": m.pred_id, "gt_id": m.gt_id, "iou": m.iou,
                           "confidence": m.confidence}
                    if m.pred_id is not None and m.gt_id is not None:
                        p, g = poses[m.pred_id], gts[m.gt_id]
                        se = scale_error(p, g)
                        cos, th = orientation_error(p, g)
                        scale_errs.append(se)
                        cosines.append(cos)
                        thetas.append(th)
                        row.update(scale_rel_err=se, cosine=cos, theta_deg=th)
                    table.append(row)

    def ap_at(t):
        if per_scene:
            return float(np.mean(per_scene_ap[t])) if per_scene_ap[t] else 0.0
        return average_precision(pooled[t], n_gt) if n_gt else 0.0

    def mean(v):
        return float(np.mean(v)) if v else None

    return EvalReport(
        map_per_threshold={t: ap_at(t) for t in thresholds},
        mean_scale_rel_err=mean(scale_errs),
        mean_cosine_sim=mean(cosines),
        mean_theta_err_deg=mean(thetas),
        n_gt=n_gt,
        n_pred=n_pred,
        n_matched=len(scale_errs),
        error_threshold=error_threshold,
        table=table,
    )
