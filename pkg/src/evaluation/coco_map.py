"""
COCO-style mean average precision for one hierarchy level.

Per category: detections of all images are ranked by confidence, each one
greedily takes the unmatched ground truth of highest IoU at or above the
threshold, and precision is interpolated at 101 recall points. AP averages
over IoU thresholds 0.50:0.05:0.95 and over categories that have ground
truth; AP50 uses the 0.50 threshold alone.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.dataset.schema import AnnotationRecord, HierarchicalDataset
from src.geometry.boxes import BoundingBox, boxes_to_array, pairwise_box_iou
from src.geometry.masks import BinaryMask, pairwise_mask_iou, rasterize_box

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETECTIONS = 100


@dataclass
class Detection:
    image_id: int
    category_id: int
    score: float
    box: BoundingBox
    mask: Optional[BinaryMask] = None


@dataclass
class MapResult:
    ap: float = 0.0
    ap50: float = 0.0
    per_category: Dict[int, Dict[str, float]] = field(default_factory=dict)

    def to_dict(self, scale: float = 100.0) -> Dict:
        return {
            "AP": self.ap * scale,
            "AP50": self.ap50 * scale,
            "per_category": {
                str(cid): {k: v * scale for k, v in vals.items()} for cid, vals in self.per_category.items()
            },
        }


def interpolated_ap(tp_flags: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP of a ranked list of true/false positives."""
    if num_gt == 0:
        return 0.0
    tp = np.asarray(tp_flags, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / num_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    # precision envelope, non-increasing in rank
    for i in range(precision.size - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(sampled.mean())


def greedy_match(iou: np.ndarray, threshold: float) -> np.ndarray:
    """TP flags for score-ordered detections (rows) against ground truth (columns)."""
    tp = np.zeros(iou.shape[0], dtype=bool)
    taken = np.zeros(iou.shape[1], dtype=bool)
    for d in range(iou.shape[0]):
        candidates = np.where(taken, -1.0, iou[d])
        if candidates.size == 0:
            continue
        g = int(np.argmax(candidates))
        if candidates[g] >= threshold:
            tp[d] = True
            taken[g] = True
    return tp


def _gt_mask(ann: AnnotationRecord, height: int, width: int) -> BinaryMask:
    return ann.mask if ann.mask is not None else rasterize_box(ann.box, height, width)


def _det_mask(det: Detection, height: int, width: int) -> BinaryMask:
    return det.mask if det.mask is not None else rasterize_box(det.box, height, width)


def _iou_matrix(dets: List[Detection], gts: List[AnnotationRecord], iou_type: str, height: int, width: int):
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    if iou_type == "box":
        return pairwise_box_iou(boxes_to_array([d.box for d in dets]), boxes_to_array([g.box for g in gts]))
    if iou_type == "mask":
        return pairwise_mask_iou(
            [_det_mask(d, height, width) for d in dets], [_gt_mask(g, height, width) for g in gts]
        )
    raise ValueError(f"iou_type must be 'box' or 'mask', got {iou_type!r}")


def limit_per_image(detections: Sequence[Detection], max_detections: int = MAX_DETECTIONS) -> List[Detection]:
    """Keep the highest-scoring detections of every image."""
    by_image: Dict[int, List[Detection]] = {}
    for det in detections:
        by_image.setdefault(det.image_id, []).append(det)
    kept = []
    for image_id in sorted(by_image):
        ranked = sorted(by_image[image_id], key=lambda d: -d.score)
        kept.extend(ranked[:max_detections])
    return kept


def evaluate_map(
    detections: Sequence[Detection],
    dataset: HierarchicalDataset,
    level: str,
    iou_type: str = "box",
    category_ids: Optional[Sequence[int]] = None,
    max_detections: int = MAX_DETECTIONS,
) -> MapResult:
    """AP and AP50 for one level.

    Args:
        detections: Predictions with confidences
        dataset: Ground truth
        level: "object" or "part"
        iou_type: "box" or "mask"
        category_ids: Restrict the mean to these categories (default: all of the level)
        max_detections: Per-image cap applied before ranking
    """
    level_ids = {c.id for c in dataset.categories_at(level)}
    wanted = sorted(level_ids if category_ids is None else set(category_ids) & level_ids)
    gts_by_key: Dict[tuple, List[AnnotationRecord]] = {}
    for ann in dataset.annotations:
        if ann.level == level and ann.category_id in wanted:
            gts_by_key.setdefault((ann.image_id, ann.category_id), []).append(ann)
    dets_by_key: Dict[tuple, List[Detection]] = {}
    for det in limit_per_image([d for d in detections if d.category_id in wanted], max_detections):
        dets_by_key.setdefault((det.image_id, det.category_id), []).append(det)

    result = MapResult()
    per_threshold = []
    for cid in wanted:
        num_gt = sum(len(v) for k, v in gts_by_key.items() if k[1] == cid)
        if num_gt == 0:
            continue
        scores: List[float] = []
        flags = [[] for _ in IOU_THRESHOLDS]
        for image in dataset.images:
            dets = sorted(dets_by_key.get((image.id, cid), []), key=lambda d: -d.score)
            if not dets:
                continue
            gts = gts_by_key.get((image.id, cid), [])
            iou = _iou_matrix(dets, gts, iou_type, image.height, image.width)
            scores.extend(d.score for d in dets)
            for t, threshold in enumerate(IOU_THRESHOLDS):
                flags[t].extend(greedy_match(iou, threshold).tolist())
        order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
        aps = [interpolated_ap(np.asarray(f, dtype=bool)[order], num_gt) for f in flags]
        result.per_category[cid] = {"AP": float(np.mean(aps)), "AP50": aps[0]}
        per_threshold.append(aps)
    if per_threshold:
        table = np.asarray(per_threshold)
        result.ap = float(table.mean())
        result.ap50 = float(table[:, 0].mean())
    return result
