"""
Turn network outputs into ranked detections in pixel coordinates.
"""

from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from src.evaluation.coco_map import MAX_DETECTIONS, Detection
from src.geometry.boxes import BoundingBox
from src.geometry.masks import BinaryMask
from src.model.box_ops import cxcywh_to_xyxy
from src.model.network import LevelPredictions, PartParser, PredictionSet
from src.model.text import Vocabulary


@torch.no_grad()
def run_model(model: PartParser, vocabulary: Vocabulary, images: torch.Tensor) -> PredictionSet:
    model.eval()
    device = next(model.parameters()).device
    return model(
        images.to(device),
        vocabulary.object_text.embeddings.to(device),
        vocabulary.part_text.embeddings.to(device),
    )


def level_detections(
    preds: LevelPredictions,
    batch_index: int,
    image_id: int,
    category_ids: Sequence[int],
    height: int,
    width: int,
    max_detections: int = MAX_DETECTIONS,
) -> List[Detection]:
    """Top-scoring (row, category) cells of one image as detections.

    Scores are sigmoid probabilities; cells with a -inf logit are never
    reported. Masks are upsampled to the image and thresholded at 0.5.
    """
    logits = preds.logits[batch_index].detach().float().cpu()
    if logits.numel() == 0:
        return []
    flat = logits.flatten()
    finite = torch.isfinite(flat)
    count = min(max_detections, int(finite.sum()))
    if count == 0:
        return []
    scores = torch.where(finite, flat.sigmoid(), torch.full_like(flat, -1.0))
    top = torch.sort(-scores, stable=True).indices[:count]
    num_categories = logits.shape[1]
    rows = (top // num_categories).tolist()
    cols = (top % num_categories).tolist()

    boxes = cxcywh_to_xyxy(preds.boxes[batch_index].detach().float().cpu())
    boxes = boxes * torch.tensor([width, height, width, height], dtype=boxes.dtype)
    masks = None
    if preds.masks is not None:
        wanted = sorted(set(rows))
        up = F.interpolate(
            preds.masks[batch_index, wanted].detach().float().cpu()[None],
            size=(height, width),
            mode="bilinear",
            align_corners=False,
        )[0]
        masks = {row: (up[i] > 0).numpy() for i, row in enumerate(wanted)}

    out = []
    for idx, row, col in zip(top.tolist(), rows, cols):
        x1, y1, x2, y2 = boxes[row].tolist()
        box = BoundingBox(
            float(np.clip(min(x1, x2), 0, width)),
            float(np.clip(min(y1, y2), 0, height)),
            float(np.clip(max(x1, x2), 0, width)),
            float(np.clip(max(y1, y2), 0, height)),
        )
        out.append(
            Detection(
                image_id=image_id,
                category_id=int(category_ids[col]),
                score=float(scores[idx]),
                box=box,
                mask=None if masks is None else BinaryMask(masks[row]),
            )
        )
    return out


def prediction_detections(
    preds: PredictionSet,
    batch_index: int,
    image_id: int,
    vocabulary: Vocabulary,
    height: int,
    width: int,
    max_detections: int = MAX_DETECTIONS,
):
    """(object detections, part detections) of one image."""
    objects = level_detections(
        preds.object, batch_index, image_id, vocabulary.object_ids, height, width, max_detections
    )
    parts = level_detections(preds.part, batch_index, image_id, vocabulary.part_ids, height, width, max_detections)
    return objects, parts
