"""Exact circle IoU and greedy detection-truth matching for F1 scoring."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


def circle_intersection_area(
    cx1: float, cy1: float, r1: float, cx2: float, cy2: float, r2: float
) -> float:
    """Exact area of the lens where two disks overlap."""
    d = float(np.hypot(cx2 - cx1, cy2 - cy1))
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        rm = min(r1, r2)
        return float(np.pi * rm * rm)
    # Clamp the cosine arguments: tangent configurations can drift past +-1.
    a1 = np.clip((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1), -1.0, 1.0)
    a2 = np.clip((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2), -1.0, 1.0)
    tri = 0.5 * np.sqrt(
        max((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2), 0.0)
    )
    return float(r1 * r1 * np.arccos(a1) + r2 * r2 * np.arccos(a2) - tri)


def circle_iou(a, b) -> float:
    """Intersection over union of two circles (duck-typed center/radius)."""
    inter = circle_intersection_area(
        a.center_x, a.center_y, a.radius, b.center_x, b.center_y, b.radius
    )
    union = np.pi * a.radius**2 + np.pi * b.radius**2 - inter
    return inter / union if union > 0 else 0.0


class Match(NamedTuple):
    detection_index: int
    truth_index: int
    iou: float


def greedy_match(detections, truths, iou_threshold: float = 0.5) -> list[Match]:
    """Pair detections with truths greedily by descending IoU.

    Only pairs of the same category at or above the threshold are eligible;
    each detection and each truth is used at most once. Ties break by
    (detection index, truth index), so the result is deterministic.
    """
    pairs = []
    for di, det in enumerate(detections):
        for ti, truth in enumerate(truths):
            if getattr(det, "category", 0) != getattr(truth, "category", 0):
                continue
            iou = circle_iou(det, truth)
            if iou >= iou_threshold:
                pairs.append((iou, di, ti))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    used_d: set[int] = set()
    used_t: set[int] = set()
    out: list[Match] = []
    for iou, di, ti in pairs:
        if di in used_d or ti in used_t:
            continue
        used_d.add(di)
        used_t.add(ti)
        out.append(Match(di, ti, iou))
    return out


class MatchStats(NamedTuple):
    true_positives: int
    false_positives: int
    false_negatives: int

    def __add__(self, other):  # type: ignore[override]
        return MatchStats(
            self.true_positives + other.true_positives,
            self.false_positives + other.false_positives,
            self.false_negatives + other.false_negatives,
        )

    @property
    def precision(self) -> float:
        denom = self.true_positives + self.false_positives
        return self.true_positives / denom if denom else 1.0

    @property
    def recall(self) -> float:
        denom = self.true_positives + self.false_negatives
        return self.true_positives / denom if denom else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def match_stats(detections, truths, iou_threshold: float = 0.5) -> MatchStats:
    matches = greedy_match(detections, truths, iou_threshold)
    tp = len(matches)
    return MatchStats(tp, len(detections) - tp, len(truths) - tp)
