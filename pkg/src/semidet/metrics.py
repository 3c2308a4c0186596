"""COCO-style detection metrics: AP at one IoU and mAP over IoU 0.50:0.05:0.95.

101-point interpolated AP; detections tie-break by input index at equal
scores; at most 100 detections per image are scored; classes with zero
ground truth are excluded from the means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, Detection, iou_matrix

IOU_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
MAX_DETS_PER_IMAGE = 100


def match_detections(
    dets: list[Detection], gts: list[tuple[Box, int]], iou_threshold: float
) -> np.ndarray:
    """TP/FP flag per detection (aligned with the input order).

    Detections are processed in descending score (ties: lower index first);
    each claims the unmatched same-class gt of highest IoU at or above the
    threshold, and a gt matches at most one detection.
    """
    flags = np.zeros(len(dets), dtype=bool)
    if not dets or not gts:
        return flags
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    gt_boxes = np.array([b.astuple() for b, _ in gts])
    gt_classes = np.array([c for _, c in gts])
    det_boxes = np.array([d.box.astuple() for d in dets])
    overlaps = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gts), dtype=bool)
    for i in order:
        cand = np.flatnonzero((gt_classes == dets[i].class_id) & ~taken)
        if cand.size == 0:
            continue
        ious = overlaps[i, cand]
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            taken[cand[j]] = True
            flags[i] = True
    return flags


def average_precision(scores: np.ndarray, tp_flags: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from scored TP/FP flags."""
    if n_gt == 0:
        return 0.0
    scores = np.asarray(scores, dtype=np.float64)
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if scores.size == 0:
        return 0.0
    order = np.lexsort((np.arange(scores.size), -scores))
    tp = tp_flags[order].astype(np.int64)
    cum_tp = np.cumsum(tp)
    counts = np.arange(1, tp.size + 1)
    precision = cum_tp / counts
    # precision envelope, monotone non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= j/100 iff 100*cum_tp >= j*n_gt: exact integer comparison
    idx = np.searchsorted(100 * cum_tp, np.arange(101) * n_gt, side="left")
    interp = np.where(idx < tp.size, precision[np.minimum(idx, tp.size - 1)], 0.0)
    return float(interp.mean())


@dataclass
class EvalResult:
    per_class: dict[int, dict[float, float]]  # class -> iou threshold -> AP
    map: float
    ap50: float
    counted_classes: tuple[int, ...] = field(default_factory=tuple)

    def to_json_dict(self) -> dict:
        return {
            "map": self.map,
            "ap50": self.ap50,
            "per_class": {
                str(c): {f"{t:.2f}": ap for t, ap in by_thr.items()}
                for c, by_thr in self.per_class.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)

    def format_table(self, class_names: dict[int, str] | None = None) -> str:
        lines = [f"{'class':<12} {'AP50':>8} {'AP':>8}"]
        for c in self.counted_classes:
            aps = self.per_class[c]
            name = (class_names or {}).get(c, str(c))
            mean_ap = float(np.mean([aps[t] for t in IOU_THRESHOLDS]))
            lines.append(f"{name:<12} {aps[0.5]:>8.4f} {mean_ap:>8.4f}")
        lines.append(f"{'all':<12} {self.ap50:>8.4f} {self.map:>8.4f}")
        return "\n".join(lines)


def evaluate(
    dets_by_image: dict[int, list[Detection]],
    gts_by_image: dict[int, list[tuple[Box, int]]],
    iou_thresholds: tuple[float, ...] = IOU_THRESHOLDS,
    max_dets: int = MAX_DETS_PER_IMAGE,
) -> EvalResult:
    """Evaluate pooled detections against ground truth, COCO style."""
    capped: dict[int, list[Detection]] = {}
    for img_id, dets in dets_by_image.items():
        if len(dets) > max_dets:
            order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))[:max_dets]
            dets = [dets[i] for i in sorted(order)]
        capped[img_id] = dets

    classes = sorted({c for gts in gts_by_image.values() for _, c in gts})
    per_class: dict[int, dict[float, float]] = {}
    for c in classes:
        n_gt = sum(sum(1 for _, cc in gts if cc == c) for gts in gts_by_image.values())
        per_class[c] = {}
        for thr in iou_thresholds:
            scores: list[float] = []
            flags: list[bool] = []
            for img_id, gts in gts_by_image.items():
                dets = [d for d in capped.get(img_id, []) if d.class_id == c]
                cls_gts = [(b, cc) for b, cc in gts if cc == c]
                f = match_detections(dets, cls_gts, thr)
                scores.extend(d.score for d in dets)
                flags.extend(bool(v) for v in f)
            per_class[c][thr] = average_precision(
                np.array(scores), np.array(flags, dtype=bool), n_gt
            )
    if classes:
        all_aps = [per_class[c][t] for c in classes for t in iou_thresholds]
        map_val = float(np.mean(all_aps))
        ap50 = float(np.mean([per_class[c][0.5] for c in classes]))
    else:
        map_val = ap50 = 0.0
    return EvalResult(
        per_class=per_class, map=map_val, ap50=ap50, counted_classes=tuple(classes)
    )
