"""
Training loop: decoupled matching, the weighted objective, AdamW with a
multi-step schedule and gradient clipping.
"""

import logging
import math
import os
import re
from dataclasses import asdict, dataclass
from typing import Iterator, Optional, Sequence

import torch
from torch.utils.data import DataLoader

from src.dataset.io import load_dataset
from src.dataset.splits import novel_names_from_splits, split_base_novel
from src.matchloss.criterion import HierarchicalCriterion
from src.matchloss.weights import COMPONENTS, LossBreakdown
from src.model.checkpoint import save_checkpoint
from src.model.network import PartParser, build_model
from src.model.text import Vocabulary, build_vocabulary, load_embedding_overrides
from src.training.config import TrainConfig
from src.training.data import HierarchicalImageDataset, collate
from src.training.metrics_log import MetricsLog
from src.utils.config import archive_config, env_device, env_num_threads

logger = logging.getLogger(__name__)

MILESTONE_CHECKPOINT = re.compile(r"checkpoint_\d{6}\.pt")
SNAPSHOT_NAME = "snapshot.pt"


class NonFiniteLossError(RuntimeError):
    """A loss component became NaN or infinite."""

    def __init__(self, component: str, iteration: int, value: float):
        self.component = component
        self.iteration = iteration
        super().__init__(f"loss component {component} is {value} at iteration {iteration}")


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    model: PartParser
    vocabulary: Vocabulary
    final: Optional[LossBreakdown] = None


def configure_runtime(seed: int, deterministic: bool):
    torch.manual_seed(seed)
    threads = env_num_threads()
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif threads:
        torch.set_num_threads(threads)


def build_optimizer(
    model: PartParser, cfg: TrainConfig, text_embeddings: Sequence[torch.Tensor] = ()
) -> torch.optim.Optimizer:
    """AdamW with the backbone at lr × backbone_lr_multiplier.

    Trainable text matrices get their own group at the base lr without
    weight decay.
    """
    opt = cfg.optimizer
    backbone = [p for n, p in model.named_parameters() if n.startswith("backbone.") and p.requires_grad]
    rest = [p for n, p in model.named_parameters() if not n.startswith("backbone.") and p.requires_grad]
    groups = [
        {"params": rest, "lr": opt.lr},
        {"params": backbone, "lr": opt.lr * opt.backbone_lr_multiplier},
    ]
    if text_embeddings:
        groups.append({"params": list(text_embeddings), "lr": opt.lr, "weight_decay": 0.0})
    return torch.optim.AdamW(
        groups,
        lr=opt.lr,
        weight_decay=opt.weight_decay,
    )


def _remove_stale_checkpoints(out_dir: str):
    """Milestone checkpoints of an earlier run in the same directory."""
    for name in sorted(os.listdir(out_dir)):
        if MILESTONE_CHECKPOINT.fullmatch(name) or name == SNAPSHOT_NAME:
            os.remove(os.path.join(out_dir, name))
            logger.info("Removed %s from an earlier run", name)


def _batches(loader: DataLoader) -> Iterator:
    while True:
        for batch in loader:
            yield batch


def train_model(cfg: TrainConfig) -> TrainResult:
    """Train on cfg.train_path; write config.json, metrics.jsonl and checkpoints into cfg.out_dir.

    Raises:
        NonFiniteLossError: a loss component is NaN or infinite
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    _remove_stale_checkpoints(cfg.out_dir)
    archive_config(cfg, cfg.out_dir)
    configure_runtime(cfg.seed, cfg.deterministic)
    device = torch.device(env_device(cfg.device))

    dataset = load_dataset(cfg.train_path)
    novel = set(cfg.novel_categories) | novel_names_from_splits(dataset)
    train_view, _ = split_base_novel(dataset, novel)
    overrides = load_embedding_overrides(cfg.text.overrides_path) if cfg.text.overrides_path else None
    vocabulary = build_vocabulary(
        train_view.categories, cfg.model.text_dim, cfg.text.seed, overrides, cfg.text.templates or None,
        include_novel=False, trainable=cfg.text.trainable,
    )
    model = build_model(cfg.model).to(device)
    for text in (vocabulary.object_text, vocabulary.part_text):
        text.embeddings = text.embeddings.detach().to(device).requires_grad_(text.trainable)
    object_text = vocabulary.object_text.embeddings
    part_text = vocabulary.part_text.embeddings

    checkpoint_path = os.path.join(cfg.out_dir, cfg.checkpoint_name)
    metrics = MetricsLog(os.path.join(cfg.out_dir, cfg.metrics_name), fresh=True)
    extra = {"text": asdict(cfg.text)}
    if cfg.iterations == 0:
        save_checkpoint(checkpoint_path, model, vocabulary, 0, extra)
        return TrainResult(checkpoint_path, metrics.path, model, vocabulary)
    if not train_view.images:
        raise ValueError(f"{cfg.train_path} has no images to train on")

    generator = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(
        HierarchicalImageDataset(train_view, cfg.train_path, vocabulary),
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=generator,
        num_workers=0 if cfg.deterministic else cfg.num_workers,
        collate_fn=collate,
    )
    criterion = HierarchicalCriterion(cfg.loss)
    trainable_text = [t.embeddings for t in (vocabulary.object_text, vocabulary.part_text) if t.trainable]
    optimizer = build_optimizer(model, cfg, trainable_text)
    milestones = cfg.milestones
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=milestones, gamma=cfg.optimizer.gamma)
    logger.info(
        "Training %d iterations, batch %d, lr milestones %s, %d object / %d part categories",
        cfg.iterations, cfg.batch_size, milestones, len(vocabulary.object_ids), len(vocabulary.part_ids),
    )

    model.train()
    batches = _batches(loader)
    breakdown = None
    for iteration in range(1, cfg.iterations + 1):
        images, targets = next(batches)
        preds = model(images.to(device), object_text, part_text)
        total, components, _ = criterion(preds, [_to_device(t, device) for t in targets])
        for name in COMPONENTS:
            value = float(components[name].detach())
            if not math.isfinite(value):
                raise NonFiniteLossError(name, iteration, value)

        optimizer.zero_grad()
        total.backward()
        if cfg.optimizer.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(list(model.parameters()) + trainable_text, cfg.optimizer.grad_clip)
        optimizer.step()
        lr = optimizer.param_groups[0]["lr"]
        scheduler.step()

        breakdown = LossBreakdown.from_components(components, cfg.loss)
        metrics.log_loss(iteration, breakdown, lr)
        if iteration % cfg.log_every == 0 or iteration == 1:
            logger.info(
                "iter %d/%d total %.4f (cls %.3f/%.3f box %.3f/%.3f mask %.3f/%.3f res %.3f)",
                iteration, cfg.iterations, breakdown.total, breakdown.cls_obj, breakdown.cls_part,
                breakdown.box_obj, breakdown.box_part, breakdown.mask_obj, breakdown.mask_part, breakdown.res,
            )
        if iteration in milestones:
            save_checkpoint(
                os.path.join(cfg.out_dir, f"checkpoint_{iteration:06d}.pt"), model, vocabulary, iteration, extra
            )
        if cfg.eval_every and cfg.val_path and iteration % cfg.eval_every == 0 and iteration < cfg.iterations:
            _snapshot(cfg, model, vocabulary, iteration, metrics, extra)

    save_checkpoint(checkpoint_path, model, vocabulary, cfg.iterations, extra)
    if cfg.eval_every and cfg.val_path:
        _snapshot(cfg, model, vocabulary, cfg.iterations, metrics, extra)
    model.eval()
    return TrainResult(checkpoint_path, metrics.path, model, vocabulary, breakdown)


def _to_device(targets, device):
    if device.type == "cpu":
        return targets
    for level in (targets.object, targets.part):
        level.labels = level.labels.to(device)
        level.boxes = level.boxes.to(device)
        if level.masks is not None:
            level.masks = level.masks.to(device)
        if level.has_mask is not None:
            level.has_mask = level.has_mask.to(device)
    return targets


def _snapshot(cfg: TrainConfig, model, vocabulary, iteration: int, metrics: MetricsLog, extra):
    from src.evaluation.runner import evaluate_checkpoint

    path = os.path.join(cfg.out_dir, SNAPSHOT_NAME)
    save_checkpoint(path, model, vocabulary, iteration, extra)
    report = evaluate_checkpoint(path, cfg.val_path, cfg.batch_size, oracle=False, device=env_device(cfg.device))
    metrics.log_eval(iteration, report.to_dict())
    model.train()
