"""
Training configuration.

Optimizer defaults follow the full-scale recipe (AdamW, step size 5e-5,
weight decay 0.05, ×0.1 decay at iteration milestones). Milestones are
given against `reference_iterations` and scaled to the run length.
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

from src.matchloss.weights import LossWeights
from src.model.config import ModelConfig


@dataclass
class OptimizerConfig:
    lr: float = 5e-5
    weight_decay: float = 0.05
    gamma: float = 0.1
    milestones: Tuple[int, ...] = (12000, 16000)
    reference_iterations: int = 18000
    backbone_lr_multiplier: float = 1.0
    grad_clip: float = 0.1

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        problems = []
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            problems.append(f"milestones must be strictly increasing, got {list(self.milestones)}")
        if self.milestones and (self.milestones[0] <= 0 or self.milestones[-1] >= self.reference_iterations):
            problems.append(
                f"milestones must lie in (0, {self.reference_iterations}), got {list(self.milestones)}"
            )
        if self.lr <= 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0 or self.backbone_lr_multiplier < 0 or self.grad_clip < 0:
            problems.append("weight_decay, backbone_lr_multiplier and grad_clip must be nonnegative")
        if problems:
            raise ValueError("; ".join(problems))

    def scaled_milestones(self, iterations: int) -> List[int]:
        """Milestones stretched to `iterations`, dropping any that collapse together or fall outside."""
        scaled = []
        for m in self.milestones:
            step = m * iterations // self.reference_iterations
            if 0 < step < iterations and (not scaled or step > scaled[-1]):
                scaled.append(step)
        return scaled


@dataclass
class TextConfig:
    seed: int = 0
    templates: Tuple[str, ...] = ()
    overrides_path: Optional[str] = None
    trainable: bool = False

    def __post_init__(self):
        self.templates = tuple(self.templates)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    text: TextConfig = field(default_factory=TextConfig)
    batch_size: int = 4
    iterations: int = 3000
    seed: int = 0
    train_path: str = "data/synth/train.json"
    val_path: Optional[str] = "data/synth/val.json"
    novel_categories: Tuple[str, ...] = ()
    out_dir: str = "runs/default"
    checkpoint_name: str = "checkpoint.pt"
    metrics_name: str = "metrics.jsonl"
    log_every: int = 10
    eval_every: int = 0
    num_workers: int = 0
    deterministic: bool = False
    device: str = "cpu"

    def __post_init__(self):
        self.novel_categories = tuple(self.novel_categories)
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.log_every < 1 or self.eval_every < 0 or self.num_workers < 0:
            raise ValueError("log_every must be >= 1; eval_every and num_workers must be >= 0")

    @property
    def milestones(self) -> List[int]:
        return self.optimizer.scaled_milestones(self.iterations)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["model"] = self.model.to_dict()
        data["optimizer"]["milestones"] = list(self.optimizer.milestones)
        data["text"]["templates"] = list(self.text.templates)
        data["novel_categories"] = list(self.novel_categories)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        data = dict(data)
        data["model"] = ModelConfig.from_dict(data.get("model", {}))
        data["loss"] = LossWeights(**data.get("loss", {}))
        data["optimizer"] = OptimizerConfig(**data.get("optimizer", {}))
        data["text"] = TextConfig(**data.get("text", {}))
        return cls(**data)
