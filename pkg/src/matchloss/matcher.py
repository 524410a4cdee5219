"""
Decoupled Hungarian matching.

Object predictions are matched to object targets and part predictions to
part targets as two independent assignment problems; no pair ever crosses
levels. Costs reuse the loss weights:

    C = λ1·focal class cost + λ2·(5·L1 + 2·(1 − GIoU)) + λ3·(dice + pixel focal)
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torchvision.ops import generalized_box_iou

from src.matchloss.losses import BOX_GIOU_WEIGHT, BOX_L1_WEIGHT, FOCAL_ALPHA, FOCAL_GAMMA
from src.matchloss.weights import DEFAULT_LOSS_WEIGHTS, LossWeights
from src.model.box_ops import cxcywh_to_xyxy
from src.model.network import LevelPredictions, PredictionSet

Pairs = List[Tuple[int, int]]


@dataclass
class LevelTargets:
    labels: torch.Tensor                     # (G,) rows of the level vocabulary
    boxes: torch.Tensor                      # (G, 4) normalized cxcywh
    masks: Optional[torch.Tensor] = None     # (G, h, w) binary at pixel-map resolution
    has_mask: Optional[torch.Tensor] = None  # (G,) bool

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @classmethod
    def empty(cls, mask_size: Optional[Tuple[int, int]] = None) -> "LevelTargets":
        masks = None if mask_size is None else torch.zeros((0,) + tuple(mask_size))
        return cls(
            labels=torch.zeros(0, dtype=torch.long),
            boxes=torch.zeros(0, 4),
            masks=masks,
            has_mask=torch.zeros(0, dtype=torch.bool),
        )


@dataclass
class ImageTargets:
    object: LevelTargets
    part: LevelTargets
    image_id: int = -1


@dataclass
class MatchResult:
    """Per-image (prediction row, target index) pairs for each level."""

    object: List[Pairs] = field(default_factory=list)
    part: List[Pairs] = field(default_factory=list)

    def num_pairs(self, level: str) -> int:
        return sum(len(p) for p in getattr(self, level))


def _min_cost(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def _lexicographic_optimum(cost: np.ndarray, best: float) -> Pairs:
    """Smallest row-sorted pair list among the assignments costing `best`.

    Pairs are fixed one at a time, each the smallest (row, col) that still
    completes to an optimal assignment over the later rows.
    """
    n, m = cost.shape
    k = min(n, m)
    tol = 1e-9 * max(1.0, abs(best))
    pairs: Pairs = []
    fixed = 0.0
    free_cols = list(range(m))
    start = 0
    while len(pairs) < k:
        need = k - len(pairs) - 1
        chosen = None
        for r in range(start, n - need):
            rest_rows = list(range(r + 1, n))
            for c in free_cols:
                rest_cols = [j for j in free_cols if j != c]
                rest = _min_cost(cost[np.ix_(rest_rows, rest_cols)]) if need else 0.0
                if fixed + cost[r, c] + rest <= best + tol:
                    chosen = (r, c)
                    break
            if chosen is not None:
                break
        if chosen is None:
            raise RuntimeError("no optimal completion found; cost matrix is ill-conditioned")
        r, c = chosen
        pairs.append((r, c))
        fixed += cost[r, c]
        free_cols.remove(c)
        start = r + 1
    return pairs


def hungarian_match(cost) -> Pairs:
    """Minimum-cost injective assignment of min(n, m) pairs.

    Pairs come back sorted by prediction row. Among equal-cost optima the
    lexicographically smallest pair list is returned.

    Raises:
        ValueError: non-2D input or a non-finite entry
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        bad = np.argwhere(~np.isfinite(cost))[0]
        raise ValueError(f"cost matrix has a non-finite entry at {tuple(int(i) for i in bad)}")
    if cost.size == 0:
        return []
    return _lexicographic_optimum(cost, _min_cost(cost))


def assignment_cost(cost, pairs: Pairs) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[r, c] for r, c in pairs))


def focal_class_cost(logits: torch.Tensor, labels: torch.Tensor, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA) -> torch.Tensor:
    """(R, G) cost of labelling row r with target g's category."""
    prob = logits[:, labels].sigmoid()
    neg = (1 - alpha) * prob ** gamma * -torch.log(1 - prob + 1e-8)
    pos = alpha * (1 - prob) ** gamma * -torch.log(prob + 1e-8)
    return pos - neg


def pairwise_box_cost(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    l1 = torch.cdist(pred, target, p=1)
    giou = generalized_box_iou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(target))
    return BOX_L1_WEIGHT * l1 + BOX_GIOU_WEIGHT * (1 - giou)


def pairwise_mask_cost(pred_logits: torch.Tensor, targets: torch.Tensor, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    """(R, G) dice + mean pixel focal cost between every prediction and target mask."""
    logits = pred_logits.flatten(1)
    tgt = targets.flatten(1).to(logits.dtype)
    hw = logits.shape[1]
    prob = logits.sigmoid()
    numerator = 2 * prob @ tgt.T + 1
    denominator = prob.sum(-1)[:, None] + tgt.sum(-1)[None, :] + 1
    dice = 1 - numerator / denominator
    focal_pos = alpha * (1 - prob) ** gamma * F.binary_cross_entropy_with_logits(
        logits, torch.ones_like(logits), reduction="none"
    )
    focal_neg = (1 - alpha) * prob ** gamma * F.binary_cross_entropy_with_logits(
        logits, torch.zeros_like(logits), reduction="none"
    )
    focal = (focal_pos @ tgt.T + focal_neg @ (1 - tgt).T) / hw
    return dice + focal


@torch.no_grad()
def level_cost_matrix(
    preds: LevelPredictions, batch_index: int, targets: LevelTargets, weights: LossWeights = DEFAULT_LOSS_WEIGHTS
) -> np.ndarray:
    """Matching cost for one image and one level, (R, G) float64."""
    logits = preds.logits[batch_index].float()
    boxes = preds.boxes[batch_index].float()
    cost = weights.cls * focal_class_cost(logits, targets.labels.to(logits.device))
    cost = cost + weights.box * pairwise_box_cost(boxes, targets.boxes.to(boxes).float())
    if preds.masks is not None and targets.masks is not None:
        mask_cost = pairwise_mask_cost(preds.masks[batch_index].float(), targets.masks.to(logits.device))
        if targets.has_mask is not None:
            mask_cost = mask_cost * targets.has_mask.to(mask_cost).unsqueeze(0)
        cost = cost + weights.mask * mask_cost
    return cost.cpu().double().numpy()


def match_level(preds: LevelPredictions, targets: List[LevelTargets], weights: LossWeights = DEFAULT_LOSS_WEIGHTS) -> List[Pairs]:
    out = []
    for b, tgt in enumerate(targets):
        if len(tgt) == 0 or preds.num_rows == 0:
            out.append([])
            continue
        out.append(hungarian_match(level_cost_matrix(preds, b, tgt, weights)))
    return out


def decoupled_match(
    preds: PredictionSet, targets: List[ImageTargets], weights: LossWeights = DEFAULT_LOSS_WEIGHTS
) -> MatchResult:
    """Two independent assignments: object rows/targets and part rows/targets."""
    return MatchResult(
        object=match_level(preds.object, [t.object for t in targets], weights),
        part=match_level(preds.part, [t.part for t in targets], weights),
    )
