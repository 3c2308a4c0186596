"""Teacher inference, confidence thresholding, and pseudo-target construction.

A pseudo label is a post-NMS detection whose combined score (objectness
times class probability) clears the confidence threshold tau. Generation is
a pure function of (teacher checkpoint, image, tau, nms threshold), so it
can run offline and persist to COCO-style JSON with per-box scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AnnotatedImage, LoadedAnnotations, load_annotations, save_annotations
from .detector import AnchorGrid, AnchorTargets, DetectorModel, assign_anchors, decode_boxes, forward
from .errors import ConfigError
from .geometry import Box, Detection, iou_matrix, nms


@dataclass
class PseudoLabelSet:
    """Post-NMS, post-threshold boxes for one image."""

    image_id: int
    boxes: list[Detection]
    teacher_tag: str
    tau: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.tau <= 1.0):
            raise ConfigError(f"tau must be in [0, 1]: {self.tau}")
        for d in self.boxes:
            if d.score < self.tau:
                raise ConfigError(
                    f"pseudo box score {d.score} below tau {self.tau} (image {self.image_id})"
                )

    def as_gt(self) -> list[tuple[Box, int]]:
        return [(d.box, d.class_id) for d in self.boxes]


def infer(
    model: DetectorModel,
    image: np.ndarray,
    nms_threshold: float = 0.5,
    score_floor: float = 0.0,
) -> list[Detection]:
    """Test-time inference: forward, decode, per-class score, NMS.

    Every (anchor, class) pair scores objectness * class probability; boxes
    are clipped to the image, sub-pixel slivers dropped, candidates below
    ``score_floor`` discarded, and per-class NMS applied. Detections return
    sorted by descending score.
    """
    out = forward(model, image)
    grid = model.grid
    boxes = decode_boxes(grid.boxes, out.t)
    boxes[:, 0] = np.clip(boxes[:, 0], 0.0, grid.image_w)
    boxes[:, 1] = np.clip(boxes[:, 1], 0.0, grid.image_h)
    boxes[:, 2] = np.clip(boxes[:, 2], 0.0, grid.image_w)
    boxes[:, 3] = np.clip(boxes[:, 3], 0.0, grid.image_h)
    valid = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
    scores = out.obj_prob[:, None] * out.cls_prob  # (N, K)

    dets: list[Detection] = []
    for i in np.flatnonzero(valid):
        b = Box(*boxes[i])
        for k in range(scores.shape[1]):
            s = float(scores[i, k])
            if s >= score_floor and s > 0.0:
                dets.append(Detection(box=b, class_id=k, score=min(s, 1.0)))
    return nms(dets, nms_threshold)


def filter_by_confidence(
    dets: list[Detection],
    tau: float,
    image_id: int = -1,
    teacher_tag: str = "",
) -> PseudoLabelSet:
    """Keep detections scoring at least tau; tau is recorded on the result."""
    kept = [d for d in dets if d.score >= tau]
    return PseudoLabelSet(image_id=image_id, boxes=kept, teacher_tag=teacher_tag, tau=tau)


def generate_pseudo_labels(
    model: DetectorModel,
    images: list[AnnotatedImage],
    tau: float,
    nms_threshold: float = 0.5,
    score_floor: float = 0.0,
) -> dict[int, PseudoLabelSet]:
    """Offline pseudo-label generation for a list of images."""
    tag = model.fingerprint()
    out: dict[int, PseudoLabelSet] = {}
    for item in images:
        dets = infer(model, item.image, nms_threshold, score_floor)
        out[item.id] = filter_by_confidence(dets, tau, image_id=item.id, teacher_tag=tag)
    return out


def assign_pseudo(
    grid: AnchorGrid,
    pl: PseudoLabelSet,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
) -> AnchorTargets:
    """Anchor targets against pseudo boxes, same rule set as ground truth.

    An empty pseudo set labels every anchor negative (background).
    """
    return assign_anchors(grid, pl.as_gt(), pos_iou=pos_iou, neg_iou=neg_iou)


def pseudo_quality(
    pl: PseudoLabelSet, gt: list[tuple[Box, int]], iou_threshold: float = 0.5
) -> tuple[float, float]:
    """(precision, recall) of pseudo boxes against ground truth.

    Greedy score-order matching, class-aware, at the given IoU. Empty pseudo
    sets score (1, 0); empty ground truth scores recall 1.
    """
    if not pl.boxes:
        return (1.0, 0.0)
    if not gt:
        return (0.0, 1.0)
    order = sorted(range(len(pl.boxes)), key=lambda i: (-pl.boxes[i].score, i))
    gt_boxes = np.array([b.astuple() for b, _ in gt])
    gt_classes = np.array([c for _, c in gt])
    det_boxes = np.array([pl.boxes[i].box.astuple() for i in order])
    overlaps = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt), dtype=bool)
    matched = 0
    for row, i in enumerate(order):
        cand = np.flatnonzero((gt_classes == pl.boxes[i].class_id) & ~taken)
        if cand.size == 0:
            continue
        ious = overlaps[row, cand]
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            taken[cand[j]] = True
            matched += 1
    return (matched / len(pl.boxes), matched / len(gt))


def save_pseudo_labels(pls: dict[int, PseudoLabelSet], path: Path | str) -> None:
    """COCO-style JSON plus per-annotation score and top-level tau/teacher_tag."""
    items = []
    scores: dict[int, list[float]] = {}
    tau = 0.0
    tag = ""
    for image_id in sorted(pls):
        pl = pls[image_id]
        tau, tag = pl.tau, pl.teacher_tag
        items.append(
            AnnotatedImage(
                image=np.zeros((8, 8, 3), dtype=np.uint8), gt=pl.as_gt(), id=image_id
            )
        )
        scores[image_id] = [d.score for d in pl.boxes]
    save_annotations(
        items,
        path,
        scores=scores,
        extra={"tau": tau, "teacher_tag": tag},
        write_images=False,
    )


def load_pseudo_labels(path: Path | str) -> dict[int, PseudoLabelSet]:
    loaded: LoadedAnnotations = load_annotations(path, load_images=False)
    tau = float(loaded.extra.get("tau", 0.0))
    tag = str(loaded.extra.get("teacher_tag", ""))
    out: dict[int, PseudoLabelSet] = {}
    for item in loaded.items:
        det_scores = loaded.scores.get(item.id, [1.0] * len(item.gt))
        dets = [
            Detection(box=b, class_id=c, score=s)
            for (b, c), s in zip(item.gt, det_scores)
        ]
        out[item.id] = PseudoLabelSet(image_id=item.id, boxes=dets, teacher_tag=tag, tau=tau)
    return out
