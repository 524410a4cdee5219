"""
Overlay rendering for annotations and predictions.

Parts are filled semi-transparently (mask, or box when the mask is
missing), objects are outlined with their box, and every instance gets its
category label. Colors come from the category id alone.
"""

import logging
import os
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from src.dataset.schema import OBJECT, PART, AnnotationRecord, CategoryRecord
from src.evaluation.coco_map import Detection
from src.geometry.masks import rasterize_box

logger = logging.getLogger(__name__)

Instance = Union[AnnotationRecord, Detection]

PART_ALPHA = 0.45
OUTLINE_WIDTH = 2


def palette_color(category_id: int) -> Tuple[int, int, int]:
    rng = np.random.default_rng(int(category_id))
    r, g, b = rng.integers(48, 256, size=3)
    return int(r), int(g), int(b)


def _level(item: Instance, categories: Mapping[int, CategoryRecord]) -> str:
    if item.category_id in categories:
        return categories[item.category_id].level
    return getattr(item, "level", OBJECT)


def _label(item: Instance, categories: Mapping[int, CategoryRecord]) -> str:
    cat = categories.get(item.category_id)
    name = cat.name if cat is not None else str(item.category_id)
    score = getattr(item, "score", None)
    return name if score is None else f"{name} {score:.2f}"


def render_overlays(
    image: np.ndarray,
    instances: Sequence[Instance],
    out_path: str,
    categories: Optional[Mapping[int, CategoryRecord]] = None,
    alpha: float = PART_ALPHA,
) -> str:
    """Draw instances over an (H, W, 3) uint8 image and save it as PNG.

    An empty instance list saves an unmodified copy.

    Returns:
        str: out_path

    Raises:
        ValueError: image is not (H, W, 3) or a mask does not match its size
        OSError: out_path cannot be written
    """
    pixels = np.asarray(image)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {pixels.shape}")
    pixels = pixels.astype(np.uint8)
    height, width = pixels.shape[:2]
    categories = dict(categories or {})
    out_dir = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(out_dir, exist_ok=True)

    if not instances:
        Image.fromarray(pixels).save(out_path, format="PNG")
        return out_path

    parts = [i for i in instances if _level(i, categories) == PART]
    objects = [i for i in instances if _level(i, categories) != PART]

    canvas = pixels.astype(np.float64)
    for item in sorted(parts, key=lambda i: i.category_id):
        box = item.box.clamp(width, height)
        region = item.mask if item.mask is not None else rasterize_box(box, height, width)
        if region.shape != (height, width):
            raise ValueError(f"mask of shape {region.shape} on a {height}x{width} image")
        color = np.array(palette_color(item.category_id), dtype=np.float64)
        bits = region.bits
        canvas[bits] = (1 - alpha) * canvas[bits] + alpha * color

    out = Image.fromarray(np.round(canvas).clip(0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(out)
    font = ImageFont.load_default()
    for item in objects:
        box = item.box.clamp(width, height)
        draw.rectangle(
            [box.x1, box.y1, max(box.x1, box.x2 - 1), max(box.y1, box.y2 - 1)],
            outline=palette_color(item.category_id),
            width=OUTLINE_WIDTH,
        )
    for item in objects + parts:
        box = item.box.clamp(width, height)
        draw.text((box.x1 + 2, box.y1 + 1), _label(item, categories), fill=palette_color(item.category_id), font=font)

    out.save(out_path, format="PNG")
    logger.info("Wrote overlay with %d objects and %d parts to %s", len(objects), len(parts), out_path)
    return out_path
