"""
Whole-dataset unification drivers used by the `unify` CLI subcommand.

Each driver processes images independently (optionally on a thread pool)
and assigns annotation ids afterwards in image order, so the output does not
depend on scheduling.
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from src.dataset.schema import (
    BASE,
    OBJECT,
    PART,
    AnnotationRecord,
    CategoryRecord,
    HierarchicalDataset,
    ImageRecord,
    validate_dataset,
)
from src.unify.hierarchy import HierarchyThreshold, hierarchy_annotations
from src.unify.merge import attach_object_annotations, merge_parts_to_object, require_mapped
from src.unify.semantic import semantic_to_instances

logger = logging.getLogger(__name__)

AGNOSTIC_OBJECT_ID = 1
AGNOSTIC_PART_ID = 2


def _map_images(fn: Callable, items: Sequence, workers: int) -> List:
    """Apply fn to each item, preserving input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as executor:
        return list(executor.map(fn, items))


def renumber_annotations(groups: List[List[AnnotationRecord]], first_id: int = 1) -> List[AnnotationRecord]:
    """Give fresh sequential ids per image group, rewriting parent links."""
    out = []
    next_id = first_id
    for group in groups:
        mapping = {}
        for ann in group:
            mapping[ann.id] = next_id
            next_id += 1
        for ann in group:
            parent = ann.parent_annotation_id
            out.append(
                dataclasses.replace(
                    ann,
                    id=mapping[ann.id],
                    parent_annotation_id=None if parent is None else mapping[parent],
                )
            )
    return out


def default_category_map(categories: Sequence[CategoryRecord]) -> Dict[int, int]:
    """Part category id -> its parent object category id."""
    return {c.id: c.parent_object_category_id for c in categories if c.level == PART}


def merge_image_parts(
    dataset: HierarchicalDataset,
    category_map: Optional[Mapping[int, int]] = None,
    workers: int = 1,
) -> HierarchicalDataset:
    """Add one object per (image, object category) from that image's parts.

    Existing object annotations are dropped; every part gets a parent.
    """
    category_map = dict(category_map or default_category_map(dataset.categories))

    def _one(image: ImageRecord) -> List[AnnotationRecord]:
        parts = [a for a in dataset.annotations_for_image(image.id) if a.level == PART]
        require_mapped(category_map, parts)
        groups: Dict[int, List[AnnotationRecord]] = {}
        for part in parts:
            groups.setdefault(category_map[part.category_id], []).append(part)
        out = []
        for object_category_id in sorted(groups):
            # temporary id, unique within the image group until renumbering
            temp_id = -(len(out) + 1)
            obj, linked = merge_parts_to_object(groups[object_category_id], temp_id, object_category_id)
            out.append(obj)
            out.extend(linked)
        return out

    groups = _map_images(_one, list(dataset.images), workers)
    merged = HierarchicalDataset(dataset.images, dataset.categories, renumber_annotations(groups))
    logger.info("Merged parts into %d object annotations",
                sum(1 for a in merged.annotations if a.level == OBJECT))
    return validate_dataset(merged)


def attach_from_sources(
    part_dataset: HierarchicalDataset,
    object_dataset: HierarchicalDataset,
    category_map: Optional[Mapping[int, int]] = None,
) -> HierarchicalDataset:
    """Bring object annotations of a second source into a part dataset.

    Both sources share image ids and category ids. Object annotations are
    re-identified after the part annotations; parts are attached by maximal
    overlap within their mapped category.
    """
    category_map = dict(category_map or default_category_map(part_dataset.categories))
    parts = [a for a in part_dataset.annotations if a.level == PART]
    first = max((a.id for a in part_dataset.annotations), default=0) + 1
    objects = [
        dataclasses.replace(a, id=first + i, parent_annotation_id=None)
        for i, a in enumerate(x for x in object_dataset.annotations if x.level == OBJECT)
    ]
    objects, linked = attach_object_annotations(parts, objects, category_map)
    attached = sum(1 for p in linked if p.parent_annotation_id is not None)
    logger.info("Attached %d of %d parts to %d objects", attached, len(linked), len(objects))
    return validate_dataset(
        HierarchicalDataset(part_dataset.images, part_dataset.categories, objects + linked)
    )


def agnostic_categories() -> Tuple[CategoryRecord, CategoryRecord]:
    return (
        CategoryRecord(AGNOSTIC_OBJECT_ID, OBJECT, OBJECT, None, BASE),
        CategoryRecord(AGNOSTIC_PART_ID, PART, PART, AGNOSTIC_OBJECT_ID, BASE),
    )


def unify_class_agnostic(
    dataset: HierarchicalDataset,
    threshold: HierarchyThreshold = HierarchyThreshold(),
    workers: int = 1,
) -> HierarchicalDataset:
    """Turn class-agnostic masks into an `object`/`part` hierarchy per image."""

    def _one(image: ImageRecord) -> List[AnnotationRecord]:
        masks = [a.mask for a in dataset.annotations_for_image(image.id) if a.mask is not None]
        if not masks:
            return []
        return hierarchy_annotations(
            masks, image.id, AGNOSTIC_OBJECT_ID, AGNOSTIC_PART_ID, first_id=1, threshold=threshold
        )

    groups = _map_images(_one, list(dataset.images), workers)
    return validate_dataset(
        HierarchicalDataset(dataset.images, agnostic_categories(), renumber_annotations(groups))
    )


def read_label_map(path: str) -> np.ndarray:
    """Single-channel label image (PNG) as an integer grid."""
    with Image.open(path) as img:
        if img.mode in ("RGB", "RGBA"):
            raise ValueError(f"{path} is a color image; label maps must be single-channel")
        return np.asarray(img).astype(np.int64)


def link_parts_to_nearest_objects(
    parts: Sequence[AnnotationRecord],
    objects: Sequence[AnnotationRecord],
    category_map: Mapping[int, int],
    shape: Tuple[int, int],
) -> List[AnnotationRecord]:
    """Parent each part with the object instance of its mapped category nearest to its pixels.

    In a label map a pixel carries one label, so object and part masks never
    overlap. Every pixel is given to the nearest object pixel of each object
    category; a part's parent is the instance owning most of its pixels
    (ties to the lower id). Parts whose object category is absent stay
    unlinked.
    """
    require_mapped(category_map, parts)
    owners: Dict[int, np.ndarray] = {}
    for category_id in sorted({o.category_id for o in objects}):
        ids = np.zeros(shape, dtype=np.int64)
        for obj in objects:
            if obj.category_id == category_id:
                ids[obj.mask.bits] = obj.id
        _, (iy, ix) = ndimage.distance_transform_edt(ids == 0, return_indices=True)
        owners[category_id] = ids[iy, ix]
    linked = []
    for part in parts:
        owner = owners.get(category_map[part.category_id])
        parent = None
        if owner is not None:
            candidates, counts = np.unique(owner[part.mask.bits], return_counts=True)
            parent = int(candidates[np.argmax(counts)])
        linked.append(dataclasses.replace(part, parent_annotation_id=parent))
    return linked


def unify_label_maps(
    images: Sequence[ImageRecord],
    label_maps: Sequence[np.ndarray],
    categories: Sequence[CategoryRecord],
    workers: int = 1,
) -> HierarchicalDataset:
    """Instances from semantic label maps, then object/part links.

    Part instances are linked to the nearest object instance of their parent
    category when the map carries object labels; otherwise parts of one
    parent category on an image are merged into a single object.

    Raises:
        UnmappedCategoryError: a part category without a parent object category
    """
    if len(images) != len(label_maps):
        raise ValueError(f"{len(images)} images but {len(label_maps)} label maps")
    levels = {c.id: c.level for c in categories}
    category_map = default_category_map(categories)

    def _one(item) -> List[AnnotationRecord]:
        image, label_map = item
        records = semantic_to_instances(label_map, image.id, first_id=1, category_levels=levels)
        objects = [r for r in records if r.level == OBJECT]
        parts = [r for r in records if r.level == PART]
        require_mapped(category_map, parts)
        if objects:
            return objects + link_parts_to_nearest_objects(parts, objects, category_map, np.shape(label_map))
        groups: Dict[int, List[AnnotationRecord]] = {}
        for part in parts:
            groups.setdefault(category_map[part.category_id], []).append(part)
        out = []
        next_id = len(records) + 1
        for object_category_id in sorted(groups):
            obj, linked = merge_parts_to_object(groups[object_category_id], next_id, object_category_id)
            next_id += 1
            out.append(obj)
            out.extend(linked)
        return out

    groups = _map_images(_one, list(zip(images, label_maps)), workers)
    return validate_dataset(HierarchicalDataset(images, categories, renumber_annotations(groups)))
