"""
Component losses over matched prediction/target pairs.

`matches` arguments are per-image lists of (prediction row, target index)
pairs; `targets` are per-image tensors indexed by the target index. Every
loss returns a scalar tensor attached to the prediction graph, also when no
pair exists.
"""

from typing import List, Optional, Sequence, Tuple

import torch
from torchvision.ops import generalized_box_iou_loss, sigmoid_focal_loss

from src.model.box_ops import box_area, cxcywh_to_xyxy, intersection

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
BOX_L1_WEIGHT = 5.0
BOX_GIOU_WEIGHT = 2.0
RESTRICTION_EPS = 1e-6

Pairs = List[Tuple[int, int]]


def _zero(t: torch.Tensor) -> torch.Tensor:
    return t.sum() * 0.0


def _gather_pairs(preds: torch.Tensor, targets: Sequence[torch.Tensor], matches: Sequence[Pairs]):
    """Stack matched prediction rows and their targets across the batch."""
    src, tgt = [], []
    for b, pairs in enumerate(matches):
        if not pairs:
            continue
        rows = torch.as_tensor([r for r, _ in pairs], dtype=torch.long, device=preds.device)
        cols = torch.as_tensor([c for _, c in pairs], dtype=torch.long, device=preds.device)
        src.append(preds[b, rows])
        tgt.append(targets[b][cols])
    if not src:
        return None, None
    return torch.cat(src), torch.cat(tgt)


def focal_cls_loss(
    logits: torch.Tensor,
    matches: Sequence[Pairs],
    labels: Sequence[torch.Tensor],
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> torch.Tensor:
    """Sigmoid focal loss over every (row, category) cell.

    Matched rows are positive for their target category; all other cells are
    negative. The sum is divided by the matched-pair count (at least 1).

    Args:
        logits: (B, R, K) similarity logits
        matches: per-image (row, target) pairs
        labels: per-image (G,) category rows of the targets
    """
    onehot = torch.zeros_like(logits)
    num_matched = 0
    for b, pairs in enumerate(matches):
        for row, col in pairs:
            onehot[b, row, int(labels[b][col])] = 1.0
        num_matched += len(pairs)
    if logits.numel() == 0:
        return _zero(logits)
    loss = sigmoid_focal_loss(logits, onehot, alpha=alpha, gamma=gamma, reduction="sum")
    return loss / max(num_matched, 1)


def pair_box_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pair 5·L1 (cxcywh) + 2·(1 − GIoU) for aligned (P, 4) cxcywh boxes."""
    l1 = (pred - target).abs().sum(-1)
    giou = generalized_box_iou_loss(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(target), reduction="none")
    return BOX_L1_WEIGHT * l1 + BOX_GIOU_WEIGHT * giou


def box_loss(pred_boxes: torch.Tensor, target_boxes: Sequence[torch.Tensor], matches: Sequence[Pairs]) -> torch.Tensor:
    """Mean over matched pairs of the 5:2 L1/GIoU mix."""
    src, tgt = _gather_pairs(pred_boxes, target_boxes, matches)
    if src is None:
        return _zero(pred_boxes)
    return pair_box_loss(src, tgt.to(src.dtype)).mean()


def dice_loss(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """1 − (2|p·t| + 1) / (|p| + |t| + 1) per row of flattened (P, X) inputs."""
    numerator = 2 * (probs * targets).sum(-1) + 1
    denominator = probs.sum(-1) + targets.sum(-1) + 1
    return 1 - numerator / denominator


def pair_mask_loss(pred_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-pair dice + mean pixel focal loss for (P, h, w) logits and binary targets."""
    logits = pred_logits.flatten(1)
    targets = targets.flatten(1).to(logits.dtype)
    focal = sigmoid_focal_loss(logits, targets, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA, reduction="none").mean(-1)
    return dice_loss(logits.sigmoid(), targets) + focal


def mask_loss(
    pred_masks: torch.Tensor,
    target_masks: Sequence[torch.Tensor],
    matches: Sequence[Pairs],
    has_mask: Optional[Sequence[torch.Tensor]] = None,
) -> torch.Tensor:
    """Mean over matched pairs whose target carries a mask.

    Args:
        pred_masks: (B, R, h, w) logits
        target_masks: per-image (G, h, w) binary masks at the same resolution
        has_mask: per-image (G,) flags; box-only targets are skipped
    """
    if has_mask is not None:
        matches = [
            [(r, c) for r, c in pairs if bool(has_mask[b][c])] for b, pairs in enumerate(matches)
        ]
    src, tgt = _gather_pairs(pred_masks, target_masks, matches)
    if src is None:
        return _zero(pred_masks)
    if src.shape[-2:] != tgt.shape[-2:]:
        raise ValueError(f"mask size mismatch: predictions {tuple(src.shape[-2:])}, targets {tuple(tgt.shape[-2:])}")
    return pair_mask_loss(src, tgt).mean()


def restriction_terms(parent_xyxy: torch.Tensor, part_xyxy: torch.Tensor, eps: float = RESTRICTION_EPS) -> torch.Tensor:
    """1 − |parent ∩ part| / |part| per aligned row, part area clamped below at eps."""
    return 1 - intersection(parent_xyxy, part_xyxy) / box_area(part_xyxy).clamp(min=eps)


def restriction_loss(
    object_boxes: torch.Tensor,
    part_boxes: torch.Tensor,
    part_slots: torch.Tensor,
    matches: Sequence[Pairs],
    eps: float = RESTRICTION_EPS,
) -> torch.Tensor:
    """Containment penalty of matched part boxes against their generating object's box.

    The parent of a part row is the object box predicted at its generating
    slot, whether or not that object row was itself matched. Terms are summed
    over the matched part rows of an image and averaged over images.

    Args:
        object_boxes: (B, N, 4) cxcywh object predictions
        part_boxes: (B, R, 4) cxcywh part predictions
        part_slots: (B, R) generating object slot of every part row
        matches: per-image part (row, target) pairs
    """
    per_image = []
    for b, pairs in enumerate(matches):
        if not pairs:
            continue
        rows = torch.as_tensor([r for r, _ in pairs], dtype=torch.long, device=part_boxes.device)
        parents = object_boxes[b, part_slots[b, rows]]
        terms = restriction_terms(cxcywh_to_xyxy(parents), cxcywh_to_xyxy(part_boxes[b, rows]), eps)
        per_image.append(terms.sum())
    if not per_image:
        return _zero(part_boxes) + _zero(object_boxes)
    return torch.stack(per_image).sum() / len(matches)
