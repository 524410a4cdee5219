"""
Object/part hierarchy from class-agnostic masks on one image.

Two masks form a qualifying pair when |i & j| / max(S_i, S_j) > t; the larger
mask of the pair is the whole, the smaller one a part. Output has exactly two
levels: a mask that is a part of a part is attached to the root object of
its best container.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from src.dataset.schema import OBJECT, PART, AnnotationRecord
from src.geometry.masks import BinaryMask, masks_to_matrix

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class HierarchyThreshold:
    t: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.t < 1.0:
            raise ValueError(f"hierarchy threshold must lie in (0, 1), got {self.t}")


@dataclass(frozen=True)
class OverlapHierarchy:
    """Per-input-mask level and parent index (None for objects)."""

    levels: List[str]
    parents: List[Optional[int]]


def overlap_matrix(masks: Sequence[BinaryMask]) -> np.ndarray:
    """Pairwise overlap ratios R_ij with a zero diagonal."""
    matrix = masks_to_matrix(masks)
    areas = matrix.sum(axis=1)
    inter = matrix @ matrix.T
    larger = np.maximum(areas[:, None], areas[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(larger > 0, inter / larger, 0.0)
    np.fill_diagonal(ratios, 0.0)
    return ratios


def build_overlap_hierarchy(
    masks: Sequence[BinaryMask], threshold: HierarchyThreshold = HierarchyThreshold()
) -> OverlapHierarchy:
    """Label each mask object- or part-level and link parts to parents.

    Args:
        masks: Class-agnostic masks of one image (same grid)
        threshold: Strict overlap threshold t

    Returns:
        OverlapHierarchy: levels and parent indices, aligned with `masks`
    """
    masks = list(masks)
    if not masks:
        raise ValueError("build_overlap_hierarchy needs at least one mask")
    for m in masks[1:]:
        if m.shape != masks[0].shape:
            raise ValueError(f"Mask dimension mismatch: {masks[0].shape} vs {m.shape}")

    n = len(masks)
    areas = [m.area for m in masks]
    ratios = overlap_matrix(masks)
    # "larger" is decided by area, equal areas by lower index
    order = sorted(range(n), key=lambda i: (-areas[i], i))
    rank = {idx: r for r, idx in enumerate(order)}

    levels: List[str] = [OBJECT] * n
    parents: List[Optional[int]] = [None] * n
    for j in order:
        containers = [i for i in range(n) if rank[i] < rank[j] and ratios[i, j] > threshold.t]
        if not containers:
            continue
        best = min(containers, key=lambda i: (-ratios[i, j], -areas[i], i))
        levels[j] = PART
        # containers rank earlier, so their parent is already resolved
        parents[j] = best if levels[best] == OBJECT else parents[best]
    return OverlapHierarchy(levels=levels, parents=parents)


def hierarchy_annotations(
    masks: Sequence[BinaryMask],
    image_id: int,
    object_category_id: int,
    part_category_id: int,
    first_id: int = 1,
    threshold: HierarchyThreshold = HierarchyThreshold(),
) -> List[AnnotationRecord]:
    """Materialise a hierarchy as annotations of the `object`/`part` categories."""
    hierarchy = build_overlap_hierarchy(masks, threshold)
    ids = [first_id + i for i in range(len(masks))]
    records = []
    for i, mask in enumerate(masks):
        level = hierarchy.levels[i]
        parent = hierarchy.parents[i]
        records.append(
            AnnotationRecord(
                id=ids[i],
                image_id=image_id,
                category_id=object_category_id if level == OBJECT else part_category_id,
                box=mask.bounding_box(),
                level=level,
                mask=mask,
                parent_annotation_id=None if parent is None else ids[parent],
            )
        )
    return records
