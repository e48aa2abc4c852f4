"""Rotated-box IoU, detection AP, trajectory errors and the joint EPA score."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .scene import box_corners

EPA_TAU = 2.0
EPA_ALPHA = 0.5
MISS_THRESHOLD = 2.0


@dataclass(frozen=True)
class DetectionBox:
    x: float
    y: float
    length: float
    width: float
    yaw: float
    score: float = 1.0

    def corners(self) -> np.ndarray:
        return box_corners(self.x, self.y, self.length, self.width, self.yaw)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by convex CCW ``clipper``."""
    out = list(subject)
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inp, out = out, []
        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    out.append(prev + (cur - prev) * (sp / (sp - sc)))
                out.append(cur)
            elif sp >= 0:
                out.append(prev + (cur - prev) * (sp / (sp - sc)))
    return np.array(out).reshape(-1, 2)


def rotated_iou(a: DetectionBox, b: DetectionBox) -> float:
    """BEV intersection-over-union of two rotated rectangles."""
    for box in (a, b):
        if not (box.length > 0 and box.width > 0):
            raise ValueError(f"degenerate box {box}")
    area_a = a.length * a.width
    area_b = b.length * b.width
    reach = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
    if math.hypot(a.x - b.x, a.y - b.y) >= reach:
        return 0.0
    inter = abs(polygon_area(clip_polygon(a.corners(), b.corners())))
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


def nms(boxes: Sequence[DetectionBox], iou_thr: float = 0.5) -> list[int]:
    """Greedy NMS; returns kept indices in descending-score order."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    keep: list[int] = []
    for i in order:
        if all(rotated_iou(boxes[i], boxes[k]) <= iou_thr for k in keep):
            keep.append(i)
    return keep


@dataclass
class MatchResult:
    tp: list[tuple[int, int, float]] = field(default_factory=list)  # (det, gt, iou)
    fp: list[int] = field(default_factory=list)
    fn: list[int] = field(default_factory=list)


def match_detections(dets: Sequence[DetectionBox], gts: Sequence[DetectionBox], iou_thr: float = 0.5) -> MatchResult:
    """Greedy score-ordered matching; each det claims its best free gt with IoU >= thr."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    res = MatchResult()
    for i in order:
        best, best_iou = -1, iou_thr
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = rotated_iou(dets[i], gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            res.tp.append((i, best, best_iou))
        else:
            res.fp.append(i)
    res.fn = [j for j in range(len(gts)) if not taken[j]]
    return res


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP from scored detections already labelled TP/FP.

    Ties in score keep the given order, so callers pass detections in their
    deterministic merge order.
    """
    if n_gt <= 0:
        raise ValueError("average precision needs at least one ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def trajectory_errors(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], miss_threshold: float = MISS_THRESHOLD):
    """(ADE, FDE, MR) over matched objects; all ``None`` when nothing matched."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        return None, None, None
    ades, fdes = [], []
    for p, g in zip(preds, gts):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ValueError(f"horizon mismatch: prediction {p.shape} vs ground truth {g.shape}")
        err = np.linalg.norm(p - g, axis=-1)
        ades.append(err.mean())
        fdes.append(err[-1])
    fdes = np.array(fdes)
    return float(np.mean(ades)), float(fdes.mean()), float(np.mean(fdes > miss_threshold))


def final_errors(preds, gts) -> np.ndarray:
    return np.array([float(np.linalg.norm(np.asarray(p)[-1] - np.asarray(g)[-1])) for p, g in zip(preds, gts)])


def epa(n_hit: int, n_fp: int, n_gt: int, alpha: float = EPA_ALPHA) -> float:
    """(hits - alpha * false positives) / ground truths, not clamped."""
    if n_gt <= 0:
        raise ValueError("EPA needs at least one ground truth")
    return (n_hit - alpha * n_fp) / n_gt


def count_hits(fde: np.ndarray, tau: float = EPA_TAU) -> int:
    return int(np.sum(np.asarray(fde) < tau))


@dataclass
class MetricsReport:
    ap: float
    ade: float | None
    fde: float | None
    mr: float | None
    epa: float
    n_gt: int
    n_det: int
    n_tp: int
    n_fp: int
    n_fn: int
    n_hit: int
    n_scenes: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    CSV_FIELDS = ("ap", "ade", "fde", "mr", "epa", "n_gt", "n_det", "n_tp", "n_fp", "n_fn", "n_hit", "n_scenes")

    def csv_row(self) -> dict:
        return {k: ("" if getattr(self, k) is None else getattr(self, k)) for k in self.CSV_FIELDS}


REPORT_SCHEMA = {
    "type": "object",
    "required": ["ap", "ade", "fde", "mr", "epa", "n_gt", "n_det", "n_tp", "n_fp", "n_fn", "n_hit", "n_scenes", "config"],
    "additionalProperties": False,
    "properties": {
        "ap": {"type": "number", "minimum": 0, "maximum": 1},
        "ade": {"type": ["number", "null"], "minimum": 0},
        "fde": {"type": ["number", "null"], "minimum": 0},
        "mr": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "epa": {"type": "number", "maximum": 1},
        "n_gt": {"type": "integer", "minimum": 0},
        "n_det": {"type": "integer", "minimum": 0},
        "n_tp": {"type": "integer", "minimum": 0},
        "n_fp": {"type": "integer", "minimum": 0},
        "n_fn": {"type": "integer", "minimum": 0},
        "n_hit": {"type": "integer", "minimum": 0},
        "n_scenes": {"type": "integer", "minimum": 0},
        "config": {"type": "object"},
    },
}


def evaluate(per_scene: Sequence[tuple[str, list[DetectionBox], list[np.ndarray], list[DetectionBox], list[np.ndarray]]],
             iou_thr: float = 0.5, tau: float = EPA_TAU, alpha: float = EPA_ALPHA) -> MetricsReport:
    """Aggregate metrics over scenes.

    Each entry is ``(scene_id, dets, det_futures, gts, gt_futures)``. Detections
    from all scenes are merged by (score desc, scene id, det index) for AP;
    EPA sums hits, false positives and ground truths over scenes.
    """
    merged, preds, gts_f = [], [], []
    n_gt = n_fp = n_fn = n_det = 0
    for scene_id, dets, det_fut, gts, gt_fut in per_scene:
        m = match_detections(dets, gts, iou_thr)
        tp_dets = {d for d, _, _ in m.tp}
        for i, d in enumerate(dets):
            merged.append((-d.score, scene_id, i, i in tp_dets))
        for d, gidx, _ in m.tp:
            preds.append(det_fut[d])
            gts_f.append(gt_fut[gidx])
        n_gt += len(gts)
        n_fp += len(m.fp)
        n_fn += len(m.fn)
        n_det += len(dets)
    merged.sort(key=lambda r: (r[0], r[1], r[2]))
    ap = average_precision([-r[0] for r in merged], [r[3] for r in merged], n_gt) if n_gt else 0.0
    ade, fde, mr = trajectory_errors(preds, gts_f)
    n_hit = count_hits(final_errors(preds, gts_f), tau) if preds else 0
    return MetricsReport(
        ap=ap, ade=ade, fde=fde, mr=mr,
        epa=epa(n_hit, n_fp, n_gt, alpha) if n_gt else 0.0,
        n_gt=n_gt, n_det=n_det, n_tp=len(preds), n_fp=n_fp, n_fn=n_fn, n_hit=n_hit,
        n_scenes=len(per_scene),
    )
