"""
Evaluation drivers: a checkpoint on a dataset file, or a predictions file
(COCO results style) on a dataset file.

Predictions file: a JSON list of
    {"image_id", "category_id", "score", "bbox": [x, y, w, h], "segmentation": RLE (optional)}
The level of each record comes from its category.
"""

import json
import logging
import os
from typing import Dict, List, Optional, Sequence

from torch.utils.data import DataLoader

from src.dataset.io import load_dataset
from src.dataset.schema import NOVEL, OBJECT, PART, HierarchicalDataset
from src.evaluation.coco_map import MAX_DETECTIONS, Detection, evaluate_map
from src.evaluation.inference import level_detections, prediction_detections, run_model
from src.evaluation.miou import (
    harmonic_miou,
    miou_by_split,
    semantic_map_from_annotations,
    semantic_map_from_detections,
)
from src.evaluation.oracle import oracle_obj_parse
from src.evaluation.report import EvalReport, NovelAP
from src.geometry.boxes import BoundingBox
from src.geometry.masks import BinaryMask
from src.model.checkpoint import load_checkpoint
from src.model.text import extend_vocabulary, load_embedding_overrides
from src.training.data import HierarchicalImageDataset, collate

logger = logging.getLogger(__name__)


def _by_image(detections: Sequence[Detection]) -> Dict[int, List[Detection]]:
    grouped: Dict[int, List[Detection]] = {}
    for det in detections:
        grouped.setdefault(det.image_id, []).append(det)
    return grouped


def evaluate_detections(
    dataset: HierarchicalDataset,
    object_detections: Sequence[Detection],
    part_detections: Sequence[Detection],
    oracle_part_detections: Optional[Sequence[Detection]] = None,
    split_key: str = "",
    semantic_threshold: float = 0.5,
) -> EvalReport:
    """All report metrics from ready-made detections."""
    report = EvalReport(category_names={c.id: c.name for c in dataset.categories})
    report.object_box = evaluate_map(object_detections, dataset, OBJECT, "box")
    report.object_mask = evaluate_map(object_detections, dataset, OBJECT, "mask")
    report.part_box = evaluate_map(part_detections, dataset, PART, "box")
    report.part_mask = evaluate_map(part_detections, dataset, PART, "mask")

    parts_by_image = _by_image(part_detections)
    pred_maps, gt_maps = [], []
    for image in dataset.images:
        pred_maps.append(
            semantic_map_from_detections(
                parts_by_image.get(image.id, []), image.height, image.width, semantic_threshold
            )
        )
        gt_maps.append(semantic_map_from_annotations(dataset, image.id, PART))
    report.miou_seen, report.miou_unseen = miou_by_split(pred_maps, gt_maps, dataset.categories_at(PART))
    if report.miou_seen is not None and report.miou_unseen is not None:
        report.hiou = harmonic_miou(report.miou_seen, report.miou_unseen)

    novel_ids = tuple(sorted(c.id for c in dataset.categories_at(PART) if c.split == NOVEL))
    if novel_ids:
        novel = evaluate_map(part_detections, dataset, PART, "mask", category_ids=novel_ids)
        report.novel_ap = NovelAP(novel.ap * 100, novel_ids, split_key)

    if oracle_part_detections is not None:
        report.oracle_part_box = evaluate_map(oracle_part_detections, dataset, PART, "box")
        report.oracle_part_mask = evaluate_map(oracle_part_detections, dataset, PART, "mask")
    return report


def evaluate_checkpoint(
    checkpoint_path: str,
    dataset_path: str,
    batch_size: int = 4,
    oracle: bool = True,
    device: str = "cpu",
    max_detections: int = MAX_DETECTIONS,
) -> EvalReport:
    """Free inference (and optionally Oracle-Obj parsing) over every image of a dataset."""
    model, trained_vocabulary, info = load_checkpoint(checkpoint_path, device)
    dataset = load_dataset(dataset_path)
    text = info.get("text", {})
    overrides = load_embedding_overrides(text["overrides_path"]) if text.get("overrides_path") else None
    vocabulary = extend_vocabulary(
        trained_vocabulary, dataset.categories, text.get("seed", 0), overrides, text.get("templates") or None
    )

    loader = DataLoader(
        HierarchicalImageDataset(dataset, dataset_path), batch_size=batch_size, shuffle=False, collate_fn=collate
    )
    object_dets, part_dets, oracle_dets = [], [], []
    offset = 0
    for images, _ in loader:
        preds = run_model(model, vocabulary, images)
        for b in range(images.shape[0]):
            record = dataset.images[offset + b]
            objects, parts = prediction_detections(
                preds, b, record.id, vocabulary, record.height, record.width, max_detections
            )
            object_dets.extend(objects)
            part_dets.extend(parts)
            if oracle:
                gt_objects = [a for a in dataset.annotations_for_image(record.id) if a.level == OBJECT]
                oracle_parts = oracle_obj_parse(model, vocabulary, images[b], gt_objects)
                oracle_dets.extend(
                    level_detections(
                        oracle_parts, 0, record.id, vocabulary.part_ids, record.height, record.width, max_detections
                    )
                )
        offset += images.shape[0]
        logger.info("Evaluated %d/%d images", offset, len(dataset.images))

    return evaluate_detections(
        dataset, object_dets, part_dets, oracle_dets if oracle else None, split_key=os.path.abspath(dataset_path)
    )


def detection_to_dict(det: Detection) -> Dict:
    record = {
        "image_id": det.image_id,
        "category_id": det.category_id,
        "score": det.score,
        "bbox": det.box.to_xywh(),
    }
    if det.mask is not None:
        record["segmentation"] = det.mask.to_rle()
    return record


def detections_from_dataset(dataset: HierarchicalDataset, score: float = 1.0) -> List[Detection]:
    """Ground truth restated as detections (the perfect-prediction fixture)."""
    return [
        Detection(a.image_id, a.category_id, score, a.box, a.mask) for a in dataset.annotations
    ]


def write_predictions(detections: Sequence[Detection], path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump([detection_to_dict(d) for d in detections], f)


def load_predictions(path: str) -> List[Detection]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Predictions file not found: {path}")
    with open(path, "r") as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise ValueError(f"{path} must contain a JSON list of detections")
    detections = []
    for i, rec in enumerate(data):
        try:
            mask = BinaryMask.from_rle(rec["segmentation"]) if rec.get("segmentation") else None
            detections.append(
                Detection(
                    image_id=int(rec["image_id"]),
                    category_id=int(rec["category_id"]),
                    score=float(rec["score"]),
                    box=BoundingBox.from_xywh(rec["bbox"]),
                    mask=mask,
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"bad detection record {i} in {path}: {e}")
    return detections


def evaluate_predictions_file(predictions_path: str, dataset_path: str) -> EvalReport:
    dataset = load_dataset(dataset_path)
    levels = {c.id: c.level for c in dataset.categories}
    objects, parts = [], []
    skipped = 0
    for det in load_predictions(predictions_path):
        level = levels.get(det.category_id)
        if level == OBJECT:
            objects.append(det)
        elif level == PART:
            parts.append(det)
        else:
            skipped += 1
    if skipped:
        logger.warning("Skipped %d detections with unknown categories", skipped)
    return evaluate_detections(dataset, objects, parts, split_key=os.path.abspath(dataset_path))
