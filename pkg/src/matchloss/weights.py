"""
Loss weights and the weighted total.

total = λ1(cls_obj + cls_part) + λ2(box_obj + box_part) + λ3(mask_obj + mask_part) + λ4·res

The matcher builds its costs from the same LossWeights instance the
criterion uses, so DEFAULT_LOSS_WEIGHTS is the single source of the defaults.
"""

from dataclasses import asdict, dataclass
from typing import Dict, Mapping

COMPONENTS = ("cls_obj", "cls_part", "box_obj", "box_part", "mask_obj", "mask_part", "res")


@dataclass(frozen=True)
class LossWeights:
    cls: float = 4.0
    box: float = 2.0
    mask: float = 5.0
    res: float = 5.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


DEFAULT_LOSS_WEIGHTS = LossWeights()


def total_loss(components: Mapping, weights: LossWeights = DEFAULT_LOSS_WEIGHTS):
    """Weighted sum of the seven components (floats or tensors)."""
    return (
        weights.cls * (components["cls_obj"] + components["cls_part"])
        + weights.box * (components["box_obj"] + components["box_part"])
        + weights.mask * (components["mask_obj"] + components["mask_part"])
        + weights.res * components["res"]
    )


@dataclass
class LossBreakdown:
    cls_obj: float = 0.0
    cls_part: float = 0.0
    box_obj: float = 0.0
    box_part: float = 0.0
    mask_obj: float = 0.0
    mask_part: float = 0.0
    res: float = 0.0
    total: float = 0.0

    @classmethod
    def from_components(cls, components: Mapping, weights: LossWeights = DEFAULT_LOSS_WEIGHTS) -> "LossBreakdown":
        """Detach components to Python floats and recompute the total from them."""
        values = {name: float(components[name]) for name in COMPONENTS}
        return cls(**values, total=float(total_loss(values, weights)))

    def components(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in COMPONENTS}

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)
