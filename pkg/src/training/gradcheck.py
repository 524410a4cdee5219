"""
Finite-difference check of the loss gradients.

Each trial draws a random micro-batch in float64 with a fixed assignment,
takes the analytic gradient of one loss with autograd and compares it with
central differences over every input coordinate. Samples sitting on a kink
of the loss (coinciding box edges, touching boxes, a part already fully
inside or outside its parent) are redrawn.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np
import torch

from src.matchloss.criterion import HierarchicalCriterion
from src.matchloss.losses import box_loss, focal_cls_loss, mask_loss, restriction_loss, restriction_terms
from src.matchloss.matcher import ImageTargets, LevelTargets, MatchResult
from src.matchloss.weights import DEFAULT_LOSS_WEIGHTS, LossWeights, total_loss
from src.model.network import LevelPredictions, PredictionSet

logger = logging.getLogger(__name__)

GRADCHECK_COMPONENTS = ("cls", "box", "mask", "res", "total", "linear")
FD_STEP = 1e-4
EDGE_MARGIN = 1e-3
MASK_SIZE = (6, 6)


class DegenerateSampleError(RuntimeError):
    def __init__(self, component: str, attempts: int):
        self.component = component
        super().__init__(f"no non-degenerate {component} sample after {attempts} draws")


@dataclass
class GradcheckReport:
    component: str
    trials: int
    errors: List[float] = field(default_factory=list)
    resamples: int = 0

    @property
    def max_relative_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def mean_relative_error(self) -> float:
        return float(np.mean(self.errors)) if self.errors else 0.0

    def to_dict(self) -> Dict:
        return {
            "component": self.component,
            "trials": self.trials,
            "max_relative_error": self.max_relative_error,
            "mean_relative_error": self.mean_relative_error,
            "resamples": self.resamples,
        }

    def print_summary(self):
        print("\n" + "=" * 60)
        print(f"GRADIENT CHECK: {self.component}")
        print("=" * 60)
        print(f"Trials:              {self.trials}")
        print(f"Resampled draws:     {self.resamples}")
        print(f"Max relative error:  {self.max_relative_error:.3e}")
        print(f"Mean relative error: {self.mean_relative_error:.3e}")
        print("=" * 60)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """‖a − n‖ / max(‖a‖, ‖n‖), zero when both gradients vanish."""
    scale = max(float(analytic.norm()), float(numeric.norm()))
    if scale == 0.0:
        return 0.0
    return float((analytic - numeric).norm()) / scale


def numeric_gradient(fn: Callable[[Sequence[torch.Tensor]], torch.Tensor], inputs: Sequence[torch.Tensor],
                     step: float = FD_STEP) -> torch.Tensor:
    """Central differences of a scalar fn over every coordinate of the inputs, flattened."""
    grads = []
    with torch.no_grad():
        for t in inputs:
            flat = t.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                hi = float(fn(inputs))
                flat[i] = orig - step
                lo = float(fn(inputs))
                flat[i] = orig
                grads.append((hi - lo) / (2 * step))
    return torch.tensor(grads, dtype=torch.float64)


def analytic_gradient(fn: Callable[[Sequence[torch.Tensor]], torch.Tensor], inputs: Sequence[torch.Tensor]) -> torch.Tensor:
    for t in inputs:
        t.grad = None
    fn(inputs).backward()
    return torch.cat([t.grad.reshape(-1) for t in inputs])


# ---- sampling ---------------------------------------------------------------

def _boxes(rng: np.random.Generator, n: int, low: float = 0.1, high: float = 0.4) -> np.ndarray:
    centers = rng.uniform(0.3, 0.7, size=(n, 2))
    sizes = rng.uniform(low, high, size=(n, 2))
    return np.concatenate([centers, sizes], axis=1)


def _xyxy(box: np.ndarray) -> np.ndarray:
    cx, cy, w, h = box
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def smooth_box_pair(a: np.ndarray, b: np.ndarray, margin: float = EDGE_MARGIN) -> bool:
    """No kink of L1, IoU or the enclosing box lies within `margin` of cxcywh boxes a and b."""
    if np.any(np.abs(a - b) <= margin):
        return False
    ax, bx = _xyxy(a), _xyxy(b)
    if np.any(np.abs(ax - bx) <= margin):
        return False
    for lo, hi in ((0, 2), (1, 3)):
        if abs(ax[hi] - bx[lo]) <= margin or abs(bx[hi] - ax[lo]) <= margin:
            return False
    return True


def strictly_partial(parent: np.ndarray, part: np.ndarray, margin: float = EDGE_MARGIN) -> bool:
    """The part box straddles the parent boundary with no coinciding edges."""
    if not smooth_box_pair(parent, part, margin):
        return False
    term = float(restriction_terms(torch.as_tensor(_xyxy(parent))[None], torch.as_tensor(_xyxy(part))[None]))
    return margin < term < 1 - margin


def _level(rng, num_rows: int, num_classes: int, num_targets: int, masks: bool):
    logits = torch.as_tensor(rng.normal(0.0, 1.5, size=(1, num_rows, num_classes)))
    boxes = torch.as_tensor(_boxes(rng, num_rows)[None])
    pred_masks = torch.as_tensor(rng.normal(0.0, 2.0, size=(1, num_rows) + MASK_SIZE)) if masks else None
    targets = LevelTargets(
        labels=torch.as_tensor(rng.integers(0, num_classes, size=num_targets), dtype=torch.long),
        boxes=torch.as_tensor(_boxes(rng, num_targets)),
        masks=torch.as_tensor((rng.random((num_targets,) + MASK_SIZE) < 0.4).astype(np.float64)),
        has_mask=torch.ones(num_targets, dtype=torch.bool),
    )
    return LevelPredictions(logits=logits, boxes=boxes, masks=pred_masks), targets


def _leaves(*tensors) -> List[torch.Tensor]:
    return [t.detach().clone().requires_grad_(True) for t in tensors if t is not None]


def _draw(component: str, rng: np.random.Generator, weights: LossWeights):
    """(fn, inputs, ok) for one random micro-batch."""
    if component == "linear":
        coeffs = torch.as_tensor(rng.normal(size=12))
        inputs = _leaves(torch.as_tensor(rng.normal(size=12)))
        return (lambda xs: (coeffs * xs[0]).sum()), inputs, True

    objects, object_targets = _level(rng, 3, 3, 2, masks=True)
    parts, part_targets = _level(rng, 4, 4, 3, masks=True)
    slots = torch.as_tensor([[0, 0, 1, 1]], dtype=torch.long)
    object_pairs = [[(0, 0), (1, 1)]]
    part_pairs = [[(0, 0), (2, 1), (3, 2)]]

    obj_np = objects.boxes[0].numpy()
    part_np = parts.boxes[0].numpy()
    box_ok = all(smooth_box_pair(obj_np[r], object_targets.boxes[c].numpy()) for r, c in object_pairs[0]) and all(
        smooth_box_pair(part_np[r], part_targets.boxes[c].numpy()) for r, c in part_pairs[0]
    )
    res_ok = all(strictly_partial(obj_np[int(slots[0, r])], part_np[r]) for r, _ in part_pairs[0])

    if component == "cls":
        inputs = _leaves(objects.logits, parts.logits)
        return (
            lambda xs: focal_cls_loss(xs[0], object_pairs, [object_targets.labels])
            + focal_cls_loss(xs[1], part_pairs, [part_targets.labels])
        ), inputs, True
    if component == "box":
        inputs = _leaves(objects.boxes, parts.boxes)
        return (
            lambda xs: box_loss(xs[0], [object_targets.boxes], object_pairs)
            + box_loss(xs[1], [part_targets.boxes], part_pairs)
        ), inputs, box_ok
    if component == "mask":
        inputs = _leaves(objects.masks, parts.masks)
        return (
            lambda xs: mask_loss(xs[0], [object_targets.masks], object_pairs)
            + mask_loss(xs[1], [part_targets.masks], part_pairs)
        ), inputs, True
    if component == "res":
        inputs = _leaves(objects.boxes, parts.boxes)
        return (lambda xs: restriction_loss(xs[0], xs[1], slots, part_pairs)), inputs, res_ok

    criterion = HierarchicalCriterion(weights)
    targets = [ImageTargets(object=object_targets, part=part_targets)]
    match = MatchResult(object=object_pairs, part=part_pairs)
    inputs = _leaves(objects.logits, objects.boxes, objects.masks, parts.logits, parts.boxes, parts.masks)

    def objective(xs):
        preds = PredictionSet(
            object=LevelPredictions(xs[0], xs[1], xs[2]),
            part=LevelPredictions(xs[3], xs[4], xs[5], slots=slots),
        )
        return total_loss(criterion.components(preds, targets, match), weights)

    return objective, inputs, box_ok and res_ok


def gradcheck(
    component: str,
    trials: int = 20,
    seed: int = 0,
    weights: LossWeights = DEFAULT_LOSS_WEIGHTS,
    step: float = FD_STEP,
    max_retries: int = 1000,
) -> GradcheckReport:
    """Worst relative gradient error of one loss over `trials` random micro-batches.

    Args:
        component: one of cls, box, mask, res, total, linear
        trials: number of accepted samples
        seed: seed of the sample stream
        weights: loss weights for the total
        step: finite-difference step
        max_retries: degenerate draws tolerated per trial

    Raises:
        ValueError: unknown component or trials < 1
        DegenerateSampleError: a trial found no smooth sample within max_retries
    """
    if component not in GRADCHECK_COMPONENTS:
        raise ValueError(f"component must be one of {GRADCHECK_COMPONENTS}, got {component!r}")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    report = GradcheckReport(component=component, trials=trials)
    for trial in range(trials):
        for attempt in range(max_retries):
            fn, inputs, ok = _draw(component, rng, weights)
            if ok:
                break
            report.resamples += 1
        else:
            raise DegenerateSampleError(component, max_retries)
        error = relative_error(analytic_gradient(fn, inputs), numeric_gradient(fn, inputs, step))
        report.errors.append(error)
        logger.debug("gradcheck %s trial %d: relative error %.3e", component, trial, error)
    logger.info("gradcheck %s: max relative error %.3e over %d trials", component, report.max_relative_error, trials)
    return report


def gradcheck_all(trials: int = 20, seed: int = 0, weights: LossWeights = DEFAULT_LOSS_WEIGHTS) -> Dict[str, GradcheckReport]:
    return {c: gradcheck(c, trials, seed, weights) for c in GRADCHECK_COMPONENTS}
