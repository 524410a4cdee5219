"""
Tensors for the network: image conversion, per-image targets and a torch
Dataset over a HierarchicalDataset.
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from src.dataset.io import load_image
from src.dataset.schema import OBJECT, PART, AnnotationRecord, HierarchicalDataset
from src.geometry.boxes import BoundingBox
from src.matchloss.matcher import ImageTargets, LevelTargets
from src.model.network import downsample_masks
from src.model.text import Vocabulary

MASK_STRIDE = 4


def image_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return torch.from_numpy(np.array(pixels, dtype=np.uint8)).permute(2, 0, 1).float() / 255.0


def normalized_cxcywh(box: BoundingBox, width: int, height: int) -> List[float]:
    return [
        (box.x1 + box.x2) / 2.0 / width,
        (box.y1 + box.y2) / 2.0 / height,
        box.width / width,
        box.height / height,
    ]


def level_targets(
    annotations: Sequence[AnnotationRecord], rows: dict, width: int, height: int
) -> LevelTargets:
    """Targets of one level; annotations whose category has no vocabulary row are left out."""
    kept = [a for a in annotations if a.category_id in rows]
    mask_size = (height // MASK_STRIDE, width // MASK_STRIDE)
    if not kept:
        return LevelTargets.empty(mask_size)
    full = torch.zeros((len(kept), height, width))
    has_mask = torch.zeros(len(kept), dtype=torch.bool)
    for i, ann in enumerate(kept):
        if ann.mask is not None:
            full[i] = torch.from_numpy(ann.mask.bits.astype(np.float32))
            has_mask[i] = True
    return LevelTargets(
        labels=torch.as_tensor([rows[a.category_id] for a in kept], dtype=torch.long),
        boxes=torch.as_tensor([normalized_cxcywh(a.box, width, height) for a in kept], dtype=torch.float32),
        masks=downsample_masks(full, mask_size),
        has_mask=has_mask,
    )


def build_targets(dataset: HierarchicalDataset, image_id: int, vocabulary: Vocabulary) -> ImageTargets:
    image = dataset.image(image_id)
    annotations = dataset.annotations_for_image(image_id)
    object_rows = {cid: i for i, cid in enumerate(vocabulary.object_ids)}
    part_rows = {cid: i for i, cid in enumerate(vocabulary.part_ids)}
    return ImageTargets(
        object=level_targets([a for a in annotations if a.level == OBJECT], object_rows, image.width, image.height),
        part=level_targets([a for a in annotations if a.level == PART], part_rows, image.width, image.height),
        image_id=image_id,
    )


class HierarchicalImageDataset(Dataset):
    """(image tensor, ImageTargets) pairs in dataset image order."""

    def __init__(self, dataset: HierarchicalDataset, dataset_path: str, vocabulary: Optional[Vocabulary] = None):
        self.dataset = dataset
        self.dataset_path = dataset_path
        self.vocabulary = vocabulary

    def __len__(self) -> int:
        return len(self.dataset.images)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, Optional[ImageTargets]]:
        record = self.dataset.images[index]
        image = image_to_tensor(load_image(self.dataset_path, record))
        targets = None if self.vocabulary is None else build_targets(self.dataset, record.id, self.vocabulary)
        return image, targets


def collate(batch):
    images = torch.stack([b[0] for b in batch])
    return images, [b[1] for b in batch]
