"""One-Pass Evaluation: rotated 3D IoU, center error, Success/Precision AUC and the tracking loop."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .data import Box3D, SequenceSample

# k/100 and k/50 are the correctly rounded decimals 0.00..1.00 and 0.00..2.00;
# np.linspace differs from them by one ulp at a handful of grid points
SUCCESS_THRESHOLDS = np.arange(101) / 100
PRECISION_THRESHOLDS = np.arange(101) / 50


def _clip(subject: list[np.ndarray], a: np.ndarray, b: np.ndarray) -> list[np.ndarray]:
    """Sutherland-Hodgman step: keep the part of ``subject`` left of edge a->b."""
    def side(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    out = []
    n = len(subject)
    for i in range(n):
        cur, nxt = subject[i], subject[(i + 1) % n]
        sc, sn = side(cur), side(nxt)
        if sc >= 0:
            out.append(cur)
        if (sc >= 0) != (sn >= 0):
            t = sc / (sc - sn)
            out.append(cur + t * (nxt - cur))
    return out


def convex_intersection_area(p: np.ndarray, q: np.ndarray) -> float:
    """Area of the intersection of two counter-clockwise convex polygons."""
    poly = [np.asarray(v, dtype=np.float64) for v in p]
    for i in range(len(q)):
        if not poly:
            return 0.0
        poly = _clip(poly, q[i], q[(i + 1) % len(q)])
    if len(poly) < 3:
        return 0.0
    xy = np.asarray(poly)
    x, y = xy[:, 0], xy[:, 1]
    return float(max(0.0, 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))))


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU of two yaw-rotated boxes."""
    if np.any(a.size <= 0) or np.any(b.size <= 0):
        raise ValueError("degenerate box size")
    if np.linalg.norm(a.center[:2] - b.center[:2]) > 0.5 * (np.hypot(*a.size[:2]) + np.hypot(*b.size[:2])):
        return 0.0
    zlo = max(a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2)
    zhi = min(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2)
    dz = max(0.0, zhi - zlo)
    if dz == 0.0:
        return 0.0
    inter = convex_intersection_area(a.corners_bev(), b.corners_bev()) * dz
    va, vb = float(np.prod(a.size)), float(np.prod(b.size))
    return float(min(1.0, max(0.0, inter / (va + vb - inter))))


def center_distance(a: Box3D, b: Box3D) -> float:
    return float(np.linalg.norm(a.center - b.center))


def success_auc(ious: Sequence[float]) -> float:
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("success_auc needs at least one value")
    hits = int(np.count_nonzero(ious[None, :] > SUCCESS_THRESHOLDS[:, None]))
    return hits / (SUCCESS_THRESHOLDS.size * ious.size)


def precision_auc(dists: Sequence[float]) -> float:
    dists = np.asarray(dists, dtype=np.float64)
    if dists.size == 0:
        raise ValueError("precision_auc needs at least one value")
    hits = int(np.count_nonzero(dists[None, :] <= PRECISION_THRESHOLDS[:, None]))
    return hits / (PRECISION_THRESHOLDS.size * dists.size)


def success_curve(ious) -> np.ndarray:
    ious = np.asarray(ious, dtype=np.float64)
    return np.array([(ious > t).mean() for t in SUCCESS_THRESHOLDS])


def precision_curve(dists) -> np.ndarray:
    dists = np.asarray(dists, dtype=np.float64)
    return np.array([(dists <= t).mean() for t in PRECISION_THRESHOLDS])


@dataclass
class TrackResult:
    boxes: list[Box3D]
    ious: list[float]
    dists: list[float]
    success: float
    precision: float

    def to_json(self) -> dict:
        frames = [{"box": [float(v) for v in b.as_array()], "iou": float(i), "dist": float(d)}
                  for b, i, d in zip(self.boxes, self.ious, self.dists)]
        return {"frames": frames, "success": self.success, "precision": self.precision}

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, data: dict) -> "TrackResult":
        frames = data["frames"]
        boxes = [Box3D(f["box"][:3], f["box"][3:6], f["box"][6]) for f in frames]
        return cls(boxes, [float(f["iou"]) for f in frames], [float(f["dist"]) for f in frames],
                   float(data["success"]), float(data["precision"]))


class Tracker(Protocol):
    def track(self, sample: SequenceSample, t: int, history: list[Box3D]) -> Box3D:
        """Predict the box at frame ``t`` given predictions for frames ``0..t-1``."""


class OracleTracker:
    def track(self, sample, t, history):
        return sample.gt_boxes[t]


class StaticTracker:
    """Previous-box baseline: repeats the last prediction forever."""

    def track(self, sample, t, history):
        prev = history[-1]
        return Box3D(prev.center.copy(), prev.size.copy(), prev.theta)


def run_ope(tracker: Tracker, sample: SequenceSample) -> TrackResult:
    """One pass, no resets; frame 0 is initialised with the ground-truth box."""
    boxes = [sample.gt_boxes[0]]
    for t in range(1, len(sample)):
        boxes.append(tracker.track(sample, t, list(boxes)))
    ious = [iou3d(p, g) for p, g in zip(boxes, sample.gt_boxes)]
    dists = [center_distance(p, g) for p, g in zip(boxes, sample.gt_boxes)]
    return TrackResult(boxes, ious, dists, success_auc(ious), precision_auc(dists))


def summarize(results: Sequence[TrackResult]) -> dict:
    """Mean Success/Precision over sequences, plus the frame-weighted variant."""
    if not results:
        raise ValueError("no results")
    ious = np.concatenate([r.ious for r in results])
    dists = np.concatenate([r.dists for r in results])
    return {
        "success": float(np.mean([r.success for r in results])),
        "precision": float(np.mean([r.precision for r in results])),
        "success_frames": success_auc(ious),
        "precision_frames": precision_auc(dists),
        "sequences": len(results),
    }
