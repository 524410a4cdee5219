#!/usr/bin/env python3
"""
Tests for the matcher, the component losses and the weighted objective.
"""

import itertools
import math
import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
from src.matchloss.criterion import HierarchicalCriterion
from src.matchloss.losses import (
    box_loss,
    dice_loss,
    focal_cls_loss,
    mask_loss,
    pair_box_loss,
    pair_mask_loss,
    restriction_loss,
    restriction_terms,
)
from src.matchloss.matcher import (
    ImageTargets,
    LevelTargets,
    assignment_cost,
    decoupled_match,
    hungarian_match,
    level_cost_matrix,
    pairwise_box_cost,
    pairwise_mask_cost,
)
from src.matchloss.weights import COMPONENTS, LossBreakdown, LossWeights, total_loss
from src.model.network import LevelPredictions, PredictionSet


def brute_force_cost(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, c] for i, c in enumerate(cols)) for cols in itertools.permutations(range(m), n))
    return min(sum(cost[r, j] for j, r in enumerate(rows)) for rows in itertools.permutations(range(n), m))


def brute_force_lexicographic(cost):
    n, m = cost.shape
    if n <= m:
        options = [sorted(enumerate(cols)) for cols in itertools.permutations(range(m), n)]
    else:
        options = [sorted((r, j) for j, r in enumerate(rows)) for rows in itertools.permutations(range(n), m)]
    best = min(assignment_cost(cost, p) for p in options)
    return min(p for p in options if assignment_cost(cost, p) == best)


def random_level(rng, rows, num_classes, targets, mask_size=(4, 4)):
    preds = LevelPredictions(
        logits=torch.tensor(rng.normal(size=(1, rows, num_classes)), dtype=torch.float32),
        boxes=torch.tensor(rng.uniform(0.2, 0.8, size=(1, rows, 4)) * [1, 1, 0.4, 0.4], dtype=torch.float32),
        masks=torch.tensor(rng.normal(size=(1, rows) + mask_size), dtype=torch.float32),
    )
    tgt = LevelTargets(
        labels=torch.tensor(rng.integers(0, num_classes, size=targets), dtype=torch.long),
        boxes=torch.tensor(rng.uniform(0.2, 0.8, size=(targets, 4)) * [1, 1, 0.4, 0.4], dtype=torch.float32),
        masks=torch.tensor(rng.random((targets,) + mask_size) < 0.5, dtype=torch.float32),
        has_mask=torch.ones(targets, dtype=torch.bool),
    )
    return preds, tgt


class TestHungarianMatch:
    """Test the assignment solver."""

    def test_against_brute_force(self):
        """Test optimal cost on 100 random matrices up to 7x7."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            n, m = rng.integers(1, 8, size=2)
            cost = rng.uniform(-5, 5, size=(n, m))
            pairs = hungarian_match(cost)
            assert len(pairs) == min(n, m)
            assert len({r for r, _ in pairs}) == len(pairs)
            assert len({c for _, c in pairs}) == len(pairs)
            assert assignment_cost(cost, pairs) == pytest.approx(brute_force_cost(cost), abs=1e-9)

    def test_sorted_by_row(self):
        """Test that pairs come back in row order."""
        pairs = hungarian_match([[9, 1, 9], [1, 9, 9], [9, 9, 1]])
        assert pairs == [(0, 1), (1, 0), (2, 2)]

    def test_tie_prefers_smallest_pairs(self):
        """Test that equal-cost optima resolve to the lexicographically smallest pair list."""
        cost = [[1, 0, 1, 0], [1, 1, 0, 1], [1, 1, 1, 0], [1, 0, 0, 0]]
        assert hungarian_match(cost) == [(0, 0), (1, 2), (2, 3), (3, 1)]
        assert hungarian_match(np.zeros((3, 2))) == [(0, 0), (1, 1)]

    def test_ties_against_brute_force(self):
        """Test 300 random 0/1 matrices up to 4x5 against exhaustive lexicographic search."""
        rng = np.random.default_rng(5)
        for _ in range(300):
            n, m = rng.integers(1, 5), rng.integers(1, 6)
            cost = rng.integers(0, 2, size=(n, m)).astype(float)
            assert hungarian_match(cost) == brute_force_lexicographic(cost)

    def test_empty(self):
        """Test that a 0-row matrix yields no pairs."""
        assert hungarian_match(np.zeros((0, 3))) == []

    def test_non_finite(self):
        """Test that NaN costs are rejected with their position."""
        with pytest.raises(ValueError, match=r"\(1, 0\)"):
            hungarian_match([[0.0, 1.0], [math.nan, 2.0]])


class TestDecoupledMatch:
    """Test that object and part matching stay separate."""

    def test_no_cross_level_pairs(self):
        """Test 1000 random scenes for level-consistent, complete assignments."""
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n_obj, n_part = int(rng.integers(1, 5)), int(rng.integers(1, 7))
            g_obj, g_part = int(rng.integers(0, 4)), int(rng.integers(0, 5))
            obj_preds, obj_tgt = random_level(rng, n_obj, 2, g_obj)
            part_preds, part_tgt = random_level(rng, n_part, 3, g_part)
            preds = PredictionSet(object=obj_preds, part=part_preds)
            match = decoupled_match(preds, [ImageTargets(obj_tgt, part_tgt)])
            assert len(match.object[0]) == min(n_obj, g_obj)
            assert len(match.part[0]) == min(n_part, g_part)
            assert all(r < n_obj and c < g_obj for r, c in match.object[0])
            assert all(r < n_part and c < g_part for r, c in match.part[0])

    def test_levels_against_brute_force(self):
        """Test each level's pairs against exhaustive search over that level's cost alone."""
        rng = np.random.default_rng(6)
        weights = LossWeights(1.0, 3.0, 0.5, 0.0)
        for _ in range(50):
            obj_preds, obj_tgt = random_level(rng, int(rng.integers(1, 5)), 2, int(rng.integers(1, 4)))
            part_preds, part_tgt = random_level(rng, int(rng.integers(1, 5)), 3, int(rng.integers(1, 5)))
            preds = PredictionSet(object=obj_preds, part=part_preds)
            match = decoupled_match(preds, [ImageTargets(obj_tgt, part_tgt)], weights)
            for pairs, level, tgt in ((match.object[0], obj_preds, obj_tgt), (match.part[0], part_preds, part_tgt)):
                cost = level_cost_matrix(level, 0, tgt, weights)
                assert assignment_cost(cost, pairs) == pytest.approx(brute_force_cost(cost), abs=1e-9)
                assert pairs == brute_force_lexicographic(cost)


class TestLosses:
    """Test the component losses."""

    def test_focal_single_positive(self):
        """Test the focal value of one positive cell at logit zero."""
        loss = focal_cls_loss(torch.zeros(1, 1, 1), [[(0, 0)]], [torch.tensor([0])])
        assert float(loss) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-6)
        assert float(loss) == pytest.approx(0.04332, abs=1e-5)

    def test_focal_normalized_by_pairs(self):
        """Test division by the matched-pair count."""
        logits = torch.zeros(1, 2, 1)
        one = focal_cls_loss(logits, [[(0, 0)]], [torch.tensor([0, 0])])
        two = focal_cls_loss(logits, [[(0, 0), (1, 1)]], [torch.tensor([0, 0])])
        assert float(one) == pytest.approx(0.25 * 0.25 * math.log(2) + 0.75 * 0.25 * math.log(2), abs=1e-6)
        assert float(two) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-6)

    def test_box_loss_identity(self):
        """Test zero loss for identical boxes and the 5:2 mix otherwise."""
        box = torch.tensor([[0.5, 0.5, 0.2, 0.2]])
        assert float(pair_box_loss(box, box)) == pytest.approx(0.0, abs=1e-6)
        shifted = torch.tensor([[0.7, 0.5, 0.2, 0.2]])
        # disjoint squares touching at an edge: GIoU = 0 - 0 = 0
        assert float(pair_box_loss(box, shifted)) == pytest.approx(5 * 0.2 + 2 * 1.0, abs=1e-5)

    def test_box_loss_without_pairs(self):
        """Test a graph-attached zero when nothing is matched."""
        boxes = torch.rand(1, 3, 4, requires_grad=True)
        loss = box_loss(boxes, [torch.zeros(0, 4)], [[]])
        loss.backward()
        assert float(loss) == 0.0 and boxes.grad is not None

    def test_focal_against_elementwise_formula(self):
        """Test a random batch against the focal formula written per cell."""
        torch.manual_seed(5)
        logits = torch.randn(2, 4, 3)
        matches = [[(0, 1), (2, 0)], [(3, 2)]]
        labels = [torch.tensor([2, 0]), torch.tensor([1, 1, 0])]
        positive = {(0, 0, 0), (0, 2, 2), (1, 3, 0)}
        expected = 0.0
        for b in range(2):
            for r in range(4):
                for k in range(3):
                    p = 1 / (1 + math.exp(-float(logits[b, r, k])))
                    if (b, r, k) in positive:
                        expected += 0.25 * (1 - p) ** 2 * -math.log(p)
                    else:
                        expected += 0.75 * p ** 2 * -math.log(1 - p)
        expected /= 3
        assert float(focal_cls_loss(logits, matches, labels)) == pytest.approx(expected, rel=1e-5)

    def test_box_loss_disjoint_closed_form(self):
        """Test two unit squares one apart (1 - GIoU = 4/3) averaged with an exact pair."""
        a = torch.tensor([[0.125, 0.125, 0.25, 0.25]])
        b = torch.tensor([[0.625, 0.125, 0.25, 0.25]])
        preds = torch.stack([a, a])
        loss = box_loss(preds, [b, a], [[(0, 0)], [(0, 0)]])
        assert float(loss) == pytest.approx((5 * 0.5 + 2 * 4 / 3) / 2, abs=1e-5)

    def test_mask_loss_against_pixel_loop(self):
        """Test dice plus mean pixel focal on 8x8 masks computed pixel by pixel."""
        torch.manual_seed(6)
        logits = torch.randn(1, 3, 8, 8)
        targets = (torch.rand(3, 8, 8) < 0.4).float()
        matches = [[(0, 2), (1, 0), (2, 1)]]
        has_mask = [torch.tensor([True, False, True])]

        def pair(pred, tgt):
            inter = p_sum = t_sum = focal = 0.0
            for y in range(8):
                for x in range(8):
                    p = 1 / (1 + math.exp(-float(pred[y, x])))
                    t = float(tgt[y, x])
                    inter += p * t
                    p_sum += p
                    t_sum += t
                    if t:
                        focal += 0.25 * (1 - p) ** 2 * -math.log(p)
                    else:
                        focal += 0.75 * p ** 2 * -math.log(1 - p)
            return 1 - (2 * inter + 1) / (p_sum + t_sum + 1) + focal / 64

        every = [pair(logits[0, r], targets[c]) for r, c in matches[0]]
        assert float(mask_loss(logits, [targets], matches)) == pytest.approx(sum(every) / 3, rel=1e-5)
        with_flags = mask_loss(logits, [targets], matches, has_mask)
        assert float(with_flags) == pytest.approx((every[0] + every[2]) / 2, rel=1e-5)

    def test_dice_perfect(self):
        """Test that identical masks have zero dice loss."""
        t = torch.ones(1, 9)
        assert float(dice_loss(t, t)) == pytest.approx(0.0)
        assert float(dice_loss(torch.zeros(1, 9), torch.zeros(1, 9))) == pytest.approx(0.0)

    def test_restriction_terms(self):
        """Test contained, disjoint and half-covered parts."""
        parent = torch.tensor([[0.0, 0.0, 1.0, 1.0]] * 3)
        parts = torch.tensor([[0.2, 0.2, 0.4, 0.4], [2.0, 2.0, 3.0, 3.0], [0.5, 0.0, 1.5, 1.0]])
        assert restriction_terms(parent, parts).tolist() == pytest.approx([0.0, 1.0, 0.5])

    def test_restriction_degenerate_part(self):
        """Test that a zero-area part does not divide by zero."""
        terms = restriction_terms(torch.tensor([[0.0, 0.0, 1.0, 1.0]]), torch.tensor([[0.5, 0.5, 0.5, 0.5]]))
        assert torch.isfinite(terms).all()

    def test_restriction_averages_over_images(self):
        """Test the per-image sum averaged over the batch."""
        object_boxes = torch.tensor([[[0.5, 0.5, 0.4, 0.4]], [[0.5, 0.5, 0.4, 0.4]]])
        part_boxes = torch.tensor([
            [[0.5, 0.5, 0.1, 0.1], [0.05, 0.05, 0.1, 0.1]],
            [[0.5, 0.5, 0.1, 0.1], [0.5, 0.5, 0.1, 0.1]],
        ])
        slots = torch.zeros(2, 2, dtype=torch.long)
        loss = restriction_loss(object_boxes, part_boxes, slots, [[(0, 0), (1, 1)], []])
        assert float(loss) == pytest.approx((0.0 + 1.0) / 2, abs=1e-6)

    def test_cost_matches_pair_losses(self):
        """Test that matching costs equal the per-pair losses."""
        rng = np.random.default_rng(2)
        preds, tgt = random_level(rng, 3, 2, 3)
        box_cost = pairwise_box_cost(preds.boxes[0], tgt.boxes)
        mask_cost = pairwise_mask_cost(preds.masks[0], tgt.masks)
        for i in range(3):
            assert float(box_cost[i, i]) == pytest.approx(
                float(pair_box_loss(preds.boxes[0, i:i + 1], tgt.boxes[i:i + 1])), abs=1e-5)
            assert float(mask_cost[i, i]) == pytest.approx(
                float(pair_mask_loss(preds.masks[0, i:i + 1], tgt.masks[i:i + 1])), abs=1e-5)


class TestWeights:
    """Test the weighted total and its breakdown."""

    def test_unit_components(self):
        """Test that unit components give 4*2 + 2*2 + 5*2 + 5."""
        assert total_loss({name: 1.0 for name in COMPONENTS}) == pytest.approx(27.0)

    def test_total_is_linear_in_weights(self):
        """Test total(a*w1 + b*w2) = a*total(w1) + b*total(w2) over random components."""
        rng = np.random.default_rng(7)
        for _ in range(20):
            values = {name: float(rng.uniform(0, 3)) for name in COMPONENTS}
            w1, w2 = rng.uniform(0, 5, size=4), rng.uniform(0, 5, size=4)
            a, b = rng.uniform(0, 2, size=2)
            mixed = total_loss(values, LossWeights(*(a * w1 + b * w2)))
            split = a * total_loss(values, LossWeights(*w1)) + b * total_loss(values, LossWeights(*w2))
            assert mixed == pytest.approx(split, rel=1e-12)
        assert total_loss({name: 1.0 for name in COMPONENTS}, LossWeights(0, 0, 0, 0)) == 0.0

    def test_negative_weight(self):
        """Test that weights must be nonnegative."""
        with pytest.raises(ValueError):
            LossWeights(res=-1.0)

    def test_breakdown_identity(self):
        """Test that the logged total is recomputed from the logged components."""
        weights = LossWeights(1.0, 2.0, 3.0, 4.0)
        values = {name: torch.tensor(0.1 * (i + 1)) for i, name in enumerate(COMPONENTS)}
        breakdown = LossBreakdown.from_components(values, weights)
        assert breakdown.total == total_loss(breakdown.components(), weights)
        assert set(breakdown.to_dict()) == set(COMPONENTS) | {"total"}


class TestCriterion:
    """Test the full objective on a tiny prediction set."""

    def make(self, rng, with_targets=True):
        obj_preds, obj_tgt = random_level(rng, 3, 2, 2 if with_targets else 0)
        part_preds, part_tgt = random_level(rng, 6, 3, 3 if with_targets else 0)
        for level in (obj_preds, part_preds):
            for name in ("logits", "boxes", "masks"):
                getattr(level, name).requires_grad_(True)
        part_preds.slots = torch.tensor([[0, 0, 0, 1, 1, 1]])
        preds = PredictionSet(object=obj_preds, part=part_preds, selected_slots=torch.tensor([[0, 1]]))
        return preds, [ImageTargets(obj_tgt, part_tgt)]

    def test_components_and_total(self):
        """Test the component keys, the weighted total and the gradient flow."""
        preds, targets = self.make(np.random.default_rng(3))
        criterion = HierarchicalCriterion()
        total, components, match = criterion(preds, targets)
        assert tuple(components) == COMPONENTS
        assert float(total) == pytest.approx(float(total_loss(components)), rel=1e-6)
        assert match.num_pairs("object") == 2 and match.num_pairs("part") == 3
        total.backward()
        assert preds.part.boxes.grad is not None
        assert preds.object.boxes.grad.abs().sum() > 0

    def test_no_targets(self):
        """Test that an image without annotations still yields a differentiable loss."""
        preds, targets = self.make(np.random.default_rng(4), with_targets=False)
        total, components, _ = HierarchicalCriterion()(preds, targets)
        assert float(components["res"]) == 0.0
        assert float(components["box_obj"]) == 0.0
        total.backward()
        assert float(total) > 0
