"""
The full training objective over one batch.

The two-stage proposals are matched against the object targets on their own
and their class/box losses are added into cls_obj/box_obj, so the seven
components and the weighted total keep the same form.
"""

from typing import Dict, List, Tuple

import torch

from src.matchloss.losses import (
    FOCAL_ALPHA,
    FOCAL_GAMMA,
    box_loss,
    focal_cls_loss,
    mask_loss,
    restriction_loss,
)
from src.matchloss.matcher import ImageTargets, MatchResult, decoupled_match, match_level
from src.matchloss.weights import COMPONENTS, DEFAULT_LOSS_WEIGHTS, LossWeights, total_loss
from src.model.network import LevelPredictions, PredictionSet


class HierarchicalCriterion:
    def __init__(
        self,
        weights: LossWeights = DEFAULT_LOSS_WEIGHTS,
        alpha: float = FOCAL_ALPHA,
        gamma: float = FOCAL_GAMMA,
    ):
        self.weights = weights
        self.alpha = alpha
        self.gamma = gamma

    def level_losses(self, preds: LevelPredictions, targets, matches) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        cls = focal_cls_loss(preds.logits, matches, [t.labels for t in targets], self.alpha, self.gamma)
        box = box_loss(preds.boxes, [t.boxes for t in targets], matches)
        if preds.masks is None or any(t.masks is None for t in targets):
            mask = preds.logits.sum() * 0.0
        else:
            mask = mask_loss(preds.masks, [t.masks for t in targets], matches, [t.has_mask for t in targets])
        return cls, box, mask

    def __call__(
        self, preds: PredictionSet, targets: List[ImageTargets]
    ) -> Tuple[torch.Tensor, Dict[str, torch.Tensor], MatchResult]:
        """Match, then evaluate every component.

        Returns:
            tuple: (weighted total, component tensors keyed by COMPONENTS, MatchResult)
        """
        match = decoupled_match(preds, targets, self.weights)
        components = self.components(preds, targets, match)
        return total_loss(components, self.weights), components, match

    def components(
        self, preds: PredictionSet, targets: List[ImageTargets], match: MatchResult
    ) -> Dict[str, torch.Tensor]:
        """The seven components under a fixed assignment."""
        object_targets = [t.object for t in targets]
        part_targets = [t.part for t in targets]

        cls_obj, box_obj, mask_obj = self.level_losses(preds.object, object_targets, match.object)
        cls_part, box_part, mask_part = self.level_losses(preds.part, part_targets, match.part)

        if preds.proposals is not None:
            proposal_match = match_level(preds.proposals, object_targets, self.weights)
            cls_obj = cls_obj + focal_cls_loss(
                preds.proposals.logits, proposal_match, [t.labels for t in object_targets], self.alpha, self.gamma
            )
            box_obj = box_obj + box_loss(preds.proposals.boxes, [t.boxes for t in object_targets], proposal_match)

        if match.num_pairs("part") and preds.part.slots is not None:
            res = restriction_loss(preds.object.boxes, preds.part.boxes, preds.part.slots, match.part)
        else:
            res = preds.part.boxes.sum() * 0.0

        return dict(zip(COMPONENTS, (cls_obj, cls_part, box_obj, box_part, mask_obj, mask_part, res)))
