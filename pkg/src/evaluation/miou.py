"""
Seen/unseen semantic mIoU and their harmonic mean.

Semantic maps are integer grids holding a category id per pixel (0 is
background). Intersections and unions are accumulated per category over
the whole corpus before dividing.
"""

from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from src.dataset.schema import NOVEL, CategoryRecord, HierarchicalDataset
from src.evaluation.coco_map import Detection
from src.geometry.masks import rasterize_box


def semantic_map_from_annotations(dataset: HierarchicalDataset, image_id: int, level: str) -> np.ndarray:
    """Category id per pixel from one image's annotations of a level."""
    image = dataset.image(image_id)
    grid = np.zeros((image.height, image.width), dtype=np.int64)
    for ann in dataset.annotations_for_image(image_id):
        if ann.level != level:
            continue
        mask = ann.mask if ann.mask is not None else rasterize_box(ann.box, image.height, image.width)
        grid[mask.bits] = ann.category_id
    return grid


def semantic_map_from_detections(
    detections: Iterable[Detection], height: int, width: int, score_threshold: float = 0.5
) -> np.ndarray:
    """Paint confident detections in ascending score order, so the best one wins a pixel."""
    grid = np.zeros((height, width), dtype=np.int64)
    kept = sorted((d for d in detections if d.score >= score_threshold), key=lambda d: d.score)
    for det in kept:
        mask = det.mask if det.mask is not None else rasterize_box(det.box, height, width)
        grid[mask.bits] = det.category_id
    return grid


def accumulate_iou(
    pred_maps: Sequence[np.ndarray], gt_maps: Sequence[np.ndarray], category_ids: Sequence[int]
) -> Dict[int, Tuple[int, int]]:
    """Per-category (intersection, union) pixel counts over a corpus.

    Raises:
        ValueError: map count or resolution mismatch
    """
    if len(pred_maps) != len(gt_maps):
        raise ValueError(f"{len(pred_maps)} predicted maps but {len(gt_maps)} ground-truth maps")
    totals = {cid: [0, 0] for cid in category_ids}
    for pred, gt in zip(pred_maps, gt_maps):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"resolution mismatch: prediction {pred.shape}, ground truth {gt.shape}")
        for cid in category_ids:
            p = pred == cid
            g = gt == cid
            totals[cid][0] += int(np.count_nonzero(p & g))
            totals[cid][1] += int(np.count_nonzero(p | g))
    return {cid: (v[0], v[1]) for cid, v in totals.items()}


def miou_by_split(
    pred_maps: Sequence[np.ndarray], gt_maps: Sequence[np.ndarray], categories: Sequence[CategoryRecord]
) -> Tuple[Optional[float], Optional[float]]:
    """(seen mIoU, unseen mIoU) in [0, 100].

    Categories that never occur in either maps are left out of their split's
    mean; a split with no remaining category yields None.
    """
    counts = accumulate_iou(pred_maps, gt_maps, [c.id for c in categories])
    seen, unseen = [], []
    for cat in categories:
        inter, union = counts[cat.id]
        if union == 0:
            continue
        (unseen if cat.split == NOVEL else seen).append(inter / union)
    seen_miou = 100.0 * float(np.mean(seen)) if seen else None
    unseen_miou = 100.0 * float(np.mean(unseen)) if unseen else None
    return seen_miou, unseen_miou


def harmonic_miou(seen: float, unseen: float) -> float:
    """2·seen·unseen / (seen + unseen); 0 when both are 0."""
    if seen + unseen == 0:
        return 0.0
    return 2.0 * seen * unseen / (seen + unseen)
