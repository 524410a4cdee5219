"""
Semantic label maps to instance annotations.

Per category: erode once (3x3 square), split the eroded plane into
4-connected components, then give every original pixel of the category to
the nearest component centroid. A plane that erodes away entirely falls back
to the components of the raw plane.
"""

import logging
from typing import List, Mapping, Optional

import numpy as np
from scipy import ndimage

from src.dataset.schema import OBJECT, AnnotationRecord
from src.geometry.masks import BinaryMask, connected_components, erode

logger = logging.getLogger(__name__)

# pixel-center distances computed per block
ASSIGN_CHUNK = 1 << 20


def _assign_to_centers(plane: np.ndarray, labels: np.ndarray, count: int) -> List[np.ndarray]:
    centers = np.array(
        ndimage.center_of_mass(np.ones_like(labels), labels, index=list(range(1, count + 1))),
        dtype=np.float64,
    ).reshape(count, 2)
    rows, cols = np.nonzero(plane)
    coords = np.stack([rows, cols], axis=1).astype(np.float64)
    owner = np.empty(len(coords), dtype=np.int64)
    step = max(1, ASSIGN_CHUNK // count)
    for start in range(0, len(coords), step):
        chunk = coords[start:start + step]
        d2 = ((chunk[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        # argmin returns the first minimum: ties go to the lower label
        owner[start:start + step] = np.argmin(d2, axis=1)
    instances = []
    for k in range(count):
        grid = np.zeros(plane.shape, dtype=bool)
        sel = owner == k
        grid[rows[sel], cols[sel]] = True
        instances.append(grid)
    return instances


def semantic_to_instances(
    label_map,
    image_id: int = 0,
    first_id: int = 1,
    category_levels: Optional[Mapping[int, str]] = None,
) -> List[AnnotationRecord]:
    """Convert a per-pixel category grid into instance annotations.

    Args:
        label_map: 2-D integer grid, 0 = background
        image_id: Image id stamped on every record
        first_id: First annotation id; ids increase in category then label order
        category_levels: Optional category id -> level (default object)

    Returns:
        list: AnnotationRecords with tight pixel boxes
    """
    grid = np.asarray(label_map)
    if grid.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {grid.shape}")
    if grid.size and grid.min() < 0:
        raise ValueError("label map categories must be nonnegative")
    category_levels = category_levels or {}

    records = []
    next_id = first_id
    for category_id in sorted(int(c) for c in np.unique(grid) if c > 0):
        plane = grid == category_id
        labels, count = connected_components(erode(BinaryMask(plane)))
        if count == 0:
            logger.warning("category %d vanished under erosion; using raw components", category_id)
            labels, count = connected_components(BinaryMask(plane))
        for bits in _assign_to_centers(plane, labels, count):
            mask = BinaryMask(bits)
            records.append(
                AnnotationRecord(
                    id=next_id,
                    image_id=image_id,
                    category_id=category_id,
                    box=mask.bounding_box(),
                    level=category_levels.get(category_id, OBJECT),
                    mask=mask,
                )
            )
            next_id += 1
    return records
