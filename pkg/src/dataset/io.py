"""
Read and write the extended COCO-style dataset file.

Top-level keys: images, categories, annotations. Categories carry `level`,
`parent_object_category_id` and `split`; annotations carry `level`,
`parent_annotation_id`, a COCO `bbox` ([x, y, w, h]) and an optional
`segmentation` holding an uncompressed RLE object ({"counts", "size"}).
"""

import dataclasses
import json
import logging
import os
import tempfile
from typing import Any, Dict

import numpy as np
from PIL import Image

from src.dataset.schema import (
    BASE,
    AnnotationRecord,
    CategoryRecord,
    DatasetNotFoundError,
    HierarchicalDataset,
    ImageRecord,
    MalformedDatasetError,
    validate_dataset,
)
from src.geometry.boxes import BoundingBox
from src.geometry.masks import BinaryMask

logger = logging.getLogger(__name__)


def _require(record: Dict, key: str, kind: str):
    if key not in record:
        raise MalformedDatasetError(f"{kind} record {record.get('id', '?')} is missing '{key}'")
    return record[key]


def dataset_from_dict(data: Any) -> HierarchicalDataset:
    """Build (and validate) a dataset from parsed JSON."""
    if not isinstance(data, dict):
        raise MalformedDatasetError("dataset file must contain a JSON object")
    for key in ("images", "categories", "annotations"):
        if not isinstance(data.get(key), list):
            raise MalformedDatasetError(f"dataset file needs a '{key}' list")

    try:
        images = [
            ImageRecord(
                id=int(_require(rec, "id", "image")),
                width=int(_require(rec, "width", "image")),
                height=int(_require(rec, "height", "image")),
                file_name=str(rec.get("file_name", "")),
            )
            for rec in data["images"]
        ]
        categories = [
            CategoryRecord(
                id=int(_require(rec, "id", "category")),
                name=str(_require(rec, "name", "category")),
                level=str(_require(rec, "level", "category")),
                parent_object_category_id=(
                    None
                    if rec.get("parent_object_category_id") is None
                    else int(rec["parent_object_category_id"])
                ),
                split=str(rec.get("split", BASE)),
            )
            for rec in data["categories"]
        ]
    except (TypeError, ValueError) as e:
        if isinstance(e, MalformedDatasetError):
            raise
        raise MalformedDatasetError(f"bad image or category record: {e}")

    sizes = {img.id: (img.width, img.height) for img in images}
    annotations = []
    for rec in data["annotations"]:
        try:
            ann_id = int(_require(rec, "id", "annotation"))
            box = BoundingBox.from_xywh(_require(rec, "bbox", "annotation"))
            mask = None
            if rec.get("segmentation") is not None:
                mask = BinaryMask.from_rle(rec["segmentation"])
            parent = rec.get("parent_annotation_id")
            annotations.append(
                AnnotationRecord(
                    id=ann_id,
                    image_id=int(_require(rec, "image_id", "annotation")),
                    category_id=int(_require(rec, "category_id", "annotation")),
                    box=box,
                    level=str(_require(rec, "level", "annotation")),
                    mask=mask,
                    parent_annotation_id=None if parent is None else int(parent),
                )
            )
        except MalformedDatasetError:
            raise
        except (TypeError, ValueError) as e:
            raise MalformedDatasetError(f"bad annotation record {rec.get('id', '?')}: {e}")

    # boxes lie within image bounds after clamping
    clamped = []
    for ann in annotations:
        if ann.image_id in sizes:
            width, height = sizes[ann.image_id]
            box = ann.box.clamp(width, height)
            if box != ann.box:
                ann = AnnotationRecord(
                    id=ann.id,
                    image_id=ann.image_id,
                    category_id=ann.category_id,
                    box=box,
                    level=ann.level,
                    mask=ann.mask,
                    parent_annotation_id=ann.parent_annotation_id,
                )
        clamped.append(ann)

    return validate_dataset(HierarchicalDataset(images, categories, clamped))


def dataset_to_dict(dataset: HierarchicalDataset) -> Dict:
    images = [
        {"id": img.id, "width": img.width, "height": img.height, "file_name": img.file_name}
        for img in dataset.images
    ]
    categories = [
        {
            "id": cat.id,
            "name": cat.name,
            "level": cat.level,
            "parent_object_category_id": cat.parent_object_category_id,
            "split": cat.split,
        }
        for cat in dataset.categories
    ]
    annotations = []
    for ann in dataset.annotations:
        record = {
            "id": ann.id,
            "image_id": ann.image_id,
            "category_id": ann.category_id,
            "bbox": ann.box.to_xywh(),
            "area": ann.area,
            "iscrowd": 0,
            "level": ann.level,
            "parent_annotation_id": ann.parent_annotation_id,
        }
        if ann.mask is not None:
            record["segmentation"] = ann.mask.to_rle()
        annotations.append(record)
    return {"images": images, "categories": categories, "annotations": annotations}


def load_dataset(path: str) -> HierarchicalDataset:
    """Load and validate a dataset file.

    Args:
        path: Path to the JSON dataset file

    Returns:
        HierarchicalDataset: the validated dataset

    Raises:
        DatasetNotFoundError: the file does not exist
        MalformedDatasetError: the file is not parseable or lacks required keys
        DanglingReferenceError / DatasetValidationError: invariant violations
    """
    if not os.path.exists(path):
        raise DatasetNotFoundError(f"Dataset file not found: {path}")
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedDatasetError(f"{path} is not valid JSON: {e}")
    dataset = dataset_from_dict(data)
    logger.info("Loaded %s: %d images, %d categories, %d annotations", path, *dataset.counts)
    return dataset


def save_dataset(dataset: HierarchicalDataset, path: str):
    """Write the dataset file (parent directories are created).

    Writes to a temporary file in the same directory and replaces the target
    only once the write succeeded.

    Raises:
        OSError: the path is not writable
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    temp_fd, temp_path = tempfile.mkstemp(dir=directory, suffix=".json", prefix=".dataset_temp_")
    try:
        with os.fdopen(temp_fd, "w") as f:
            json.dump(dataset_to_dict(dataset), f, indent=2)
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise
    logger.info("Saved %s: %d images, %d categories, %d annotations", path, *dataset.counts)


def resolve_image_path(dataset_path: str, record: ImageRecord) -> str:
    """Image paths in a dataset file are relative to the file's directory."""
    if os.path.isabs(record.file_name):
        return record.file_name
    return os.path.join(os.path.dirname(os.path.abspath(dataset_path)), record.file_name)


def load_image(dataset_path: str, record: ImageRecord) -> np.ndarray:
    """RGB pixels (H, W, 3) uint8 of an image record."""
    path = resolve_image_path(dataset_path, record)
    if not os.path.exists(path):
        raise DatasetNotFoundError(f"Image file not found: {path}")
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"))
    if pixels.shape[:2] != (record.height, record.width):
        raise MalformedDatasetError(
            f"image {record.id} is {pixels.shape[1]}x{pixels.shape[0]}, "
            f"dataset says {record.width}x{record.height}"
        )
    return pixels


def relocate_images(dataset: HierarchicalDataset, source_path: str, target_path: str) -> HierarchicalDataset:
    """Rewrite relative image paths so they resolve from target_path's directory."""
    target_dir = os.path.dirname(os.path.abspath(target_path))
    images = tuple(
        dataclasses.replace(
            record, file_name=os.path.relpath(resolve_image_path(source_path, record), target_dir)
        )
        if not os.path.isabs(record.file_name)
        else record
        for record in dataset.images
    )
    return HierarchicalDataset(images, dataset.categories, dataset.annotations)
