"""
Oracle-Obj parsing: ground-truth objects are given, only parts are predicted.

Object queries come from mask-pooling the pixel embedding map over each
ground-truth object mask followed by one object-decoder pass. The Q-Former
parses them, and every part row is scored only against the part categories
of its ground-truth object's category (other cells are set to -inf).
"""

from typing import Sequence

import torch
import torch.nn.functional as F

from src.dataset.schema import AnnotationRecord
from src.model.network import LevelPredictions, PartParser, downsample_masks
from src.model.text import Vocabulary
from src.training.data import MASK_STRIDE, normalized_cxcywh


def _empty_parts(num_categories: int, mask_size) -> LevelPredictions:
    return LevelPredictions(
        logits=torch.zeros((1, 0, num_categories)),
        boxes=torch.zeros((1, 0, 4)),
        masks=torch.zeros((1, 0) + tuple(mask_size)),
        slots=torch.zeros((1, 0), dtype=torch.long),
    )


@torch.no_grad()
def oracle_obj_parse(
    model: PartParser, vocabulary: Vocabulary, image: torch.Tensor, gt_objects: Sequence[AnnotationRecord]
) -> LevelPredictions:
    """Part predictions for one (3, H, W) image given its ground-truth objects.

    Returns:
        LevelPredictions with batch size 1 and len(gt_objects) * L rows
    """
    model.eval()
    height, width = image.shape[-2:]
    mask_size = (height // MASK_STRIDE, width // MASK_STRIDE)
    num_parts = len(vocabulary.part_ids)
    gt_objects = list(gt_objects)
    if not gt_objects:
        return _empty_parts(num_parts, mask_size)

    device = next(model.parameters()).device
    object_text = vocabulary.object_text.embeddings.to(device)
    part_text = vocabulary.part_text.embeddings.to(device)
    features, pixel_map = model.encode_image(image[None].to(device), torch.cat([object_text, part_text]))

    full = torch.zeros((len(gt_objects), height, width))
    for i, obj in enumerate(gt_objects):
        if obj.mask is not None:
            full[i] = torch.from_numpy(obj.mask.bits.astype("float32"))
        else:
            x1, y1, x2, y2 = (int(round(v)) for v in obj.box.to_list())
            full[i, y1:y2, x1:x2] = 1.0
    pooled_masks = downsample_masks(full, mask_size)
    # objects thinner than a pixel-map cell keep every cell they touch
    coarse = (F.adaptive_max_pool2d(full, mask_size) > 0).float()
    empty = pooled_masks.flatten(1).sum(-1) == 0
    pooled_masks[empty] = coarse[empty]

    boxes = torch.as_tensor(
        [normalized_cxcywh(o.box, width, height) for o in gt_objects], dtype=torch.float32
    )
    queries, objects = model.objects_from_masks(
        features, pixel_map, pooled_masks[None].to(device), boxes[None].to(device), object_text
    )
    slots = torch.arange(len(gt_objects), device=device)[None]
    parts = model.parse_parts(queries, objects.boxes, features, pixel_map, part_text, slots)

    allowed = torch.zeros_like(parts.logits, dtype=torch.bool)
    num_parse = model.cfg.num_parsing_queries
    for i, obj in enumerate(gt_objects):
        cols = vocabulary.part_rows_for_object(obj.category_id)
        if cols:
            allowed[0, i * num_parse:(i + 1) * num_parse, cols] = True
    parts.logits = parts.logits.masked_fill(~allowed, float("-inf"))
    return parts
