"""
Object-level annotations for part-only sources.

merge_parts_to_object builds one object instance from the parts of that
instance (enclosing box, union mask). attach_object_annotations links parts
to object annotations taken from a second source by maximal overlap ratio.
"""

import dataclasses
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from src.dataset.schema import OBJECT, PART, AnnotationRecord
from src.geometry.boxes import enclosing_box, intersection_area
from src.geometry.masks import BinaryMask, mask_union, overlap_ratio, rasterize_box


class UnmappedCategoryError(ValueError):
    """Part categories with no object category to map to."""

    def __init__(self, category_ids: Iterable[int]):
        self.category_ids = sorted(set(category_ids))
        super().__init__(f"category_map has no entry for part categories {self.category_ids}")


def require_mapped(category_map: Mapping[int, Optional[int]], parts: Iterable[AnnotationRecord]):
    missing = [p.category_id for p in parts if category_map.get(p.category_id) is None]
    if missing:
        raise UnmappedCategoryError(missing)


def merge_parts_to_object(
    parts: Sequence[AnnotationRecord], object_id: int, object_category_id: int
) -> Tuple[AnnotationRecord, List[AnnotationRecord]]:
    """Create the object annotation that owns a group of parts.

    Args:
        parts: Part annotations of one object instance on one image
        object_id: Annotation id for the new object
        object_category_id: Category id for the new object

    Returns:
        tuple: (object annotation, parts re-parented to the new object)

    Raises:
        ValueError: empty group, non-part records, or parts from several images
    """
    parts = list(parts)
    if not parts:
        raise ValueError("merge_parts_to_object needs at least one part")
    non_parts = [p.id for p in parts if p.level != PART]
    if non_parts:
        raise ValueError(f"annotations {non_parts} are not part-level")
    image_ids = sorted({p.image_id for p in parts})
    if len(image_ids) > 1:
        raise ValueError(f"parts span several images: {image_ids}")

    masks = [p.mask for p in parts if p.mask is not None]
    obj = AnnotationRecord(
        id=object_id,
        image_id=image_ids[0],
        category_id=object_category_id,
        box=enclosing_box(p.box for p in parts),
        level=OBJECT,
        mask=mask_union(masks) if masks else None,
    )
    linked = [dataclasses.replace(p, parent_annotation_id=object_id) for p in parts]
    return obj, linked


def _region_overlap(part: AnnotationRecord, obj: AnnotationRecord) -> float:
    """Overlap ratio between a part region and an object region.

    Masks are used when present; a maskless side is rasterized from its box
    onto the other side's grid, and two maskless records use box areas.
    """
    part_mask: Optional[BinaryMask] = part.mask
    obj_mask: Optional[BinaryMask] = obj.mask
    if part_mask is None and obj_mask is None:
        larger = max(part.box.area, obj.box.area)
        if larger <= 0:
            return 0.0
        return intersection_area(part.box, obj.box) / larger
    if part_mask is None:
        part_mask = rasterize_box(part.box, obj_mask.height, obj_mask.width)
    if obj_mask is None:
        obj_mask = rasterize_box(obj.box, part_mask.height, part_mask.width)
    return overlap_ratio(part_mask, obj_mask)


def attach_object_annotations(
    parts: Iterable[AnnotationRecord],
    objects: Iterable[AnnotationRecord],
    category_map: Mapping[int, int],
) -> Tuple[List[AnnotationRecord], List[AnnotationRecord]]:
    """Assign each part to the best-overlapping object of its mapped category.

    Args:
        parts: Part annotations
        objects: Object annotations (same image set as the parts)
        category_map: Part category id -> object category id

    Returns:
        tuple: (objects, parts with parent_annotation_id set or cleared)

    Raises:
        UnmappedCategoryError: if a part category is missing from category_map
    """
    parts = list(parts)
    objects = list(objects)
    require_mapped(category_map, parts)

    by_key: Dict[Tuple[int, int], List[AnnotationRecord]] = {}
    for obj in objects:
        by_key.setdefault((obj.image_id, obj.category_id), []).append(obj)

    linked = []
    for part in parts:
        candidates = by_key.get((part.image_id, category_map[part.category_id]), [])
        best_id = None
        best_overlap = 0.0
        for obj in candidates:
            r = _region_overlap(part, obj)
            if r > best_overlap:
                best_id, best_overlap = obj.id, r
        linked.append(dataclasses.replace(part, parent_annotation_id=best_id))
    return objects, linked
