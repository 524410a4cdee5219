"""
Composed-shape scene generator with exact two-level ground truth.

Every image draws its randomness from its own generator keyed by
(seed, split, index), so images can be produced on a thread pool in any
order and the corpus is still identical for a given seed. Object
annotations are built from their parts with merge_parts_to_object, so the
object box is the enclosing box of the part boxes and the object mask is
the union of the part masks.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image

from src.dataset.io import save_dataset
from src.dataset.schema import (
    BASE,
    NOVEL,
    OBJECT,
    PART,
    AnnotationRecord,
    CategoryRecord,
    HierarchicalDataset,
    ImageRecord,
    validate_dataset,
)
from src.geometry.masks import BinaryMask
from src.synthdata.templates import DEFAULT_TEMPLATES, TEMPLATES, ObjectTemplate, rasterize_part
from src.unify.merge import merge_parts_to_object
from src.unify.pipeline import renumber_annotations

logger = logging.getLogger(__name__)

SPLIT_CODES = {"train": 0, "val": 1}
OBJECT_MARGIN = 2.0


class SynthesisError(RuntimeError):
    """A template could not be placed within the retry budget."""

    def __init__(self, template: str, attempts: int, detail: str = ""):
        self.template = template
        message = f"could not place template {template!r} after {attempts} attempts"
        super().__init__(f"{message}: {detail}" if detail else message)


@dataclass
class SynthSpec:
    image_size: int = 128
    templates: Tuple[str, ...] = DEFAULT_TEMPLATES
    novel_templates: Tuple[str, ...] = ()
    objects_per_image: Tuple[int, int] = (1, 3)
    object_size: Tuple[float, float] = (0.28, 0.42)  # frame width / image side
    aspect_jitter: float = 0.1
    seed: int = 0
    train_size: int = 500
    val_size: int = 100
    max_retries: int = 200
    background_noise: float = 10.0

    def __post_init__(self):
        self.templates = tuple(self.templates)
        self.novel_templates = tuple(self.novel_templates)
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        self.object_size = tuple(float(v) for v in self.object_size)
        problems = []
        unknown = [t for t in self.templates + self.novel_templates if t not in TEMPLATES]
        if unknown:
            problems.append(f"unknown templates {unknown}; available: {sorted(TEMPLATES)}")
        if not self.templates:
            problems.append("at least one template is required")
        if not set(self.novel_templates) <= set(self.templates):
            problems.append("novel_templates must be a subset of templates")
        if self.templates and set(self.novel_templates) == set(self.templates):
            problems.append("at least one template must stay in training")
        low, high = self.objects_per_image
        if not 1 <= low <= high:
            problems.append(f"objects_per_image must satisfy 1 <= min <= max, got {self.objects_per_image}")
        lo, hi = self.object_size
        if not 0 < lo <= hi <= 1:
            problems.append(f"object_size must satisfy 0 < min <= max <= 1, got {self.object_size}")
        if self.image_size < 32:
            problems.append(f"image_size must be at least 32, got {self.image_size}")
        if self.train_size < 0 or self.val_size < 0:
            problems.append("train_size and val_size must be nonnegative")
        if self.max_retries < 1:
            problems.append("max_retries must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def base_templates(self) -> Tuple[str, ...]:
        return tuple(t for t in self.templates if t not in self.novel_templates)

    def to_dict(self) -> Dict:
        data = asdict(self)
        for key in ("templates", "novel_templates", "objects_per_image", "object_size"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "SynthSpec":
        return cls(**data)


@dataclass
class Scene:
    height: int
    width: int
    background_seed: int
    layers: List[Tuple[np.ndarray, Tuple[int, int, int]]] = field(default_factory=list)


@dataclass
class SynthCorpus:
    spec: SynthSpec
    train: HierarchicalDataset
    val: HierarchicalDataset
    images: Dict[str, List[np.ndarray]]


def corpus_categories(spec: SynthSpec) -> List[CategoryRecord]:
    """Object categories 1..T in template order, then their parts."""
    categories = []
    next_part_id = len(spec.templates) + 1
    parts = []
    for i, name in enumerate(spec.templates):
        split = NOVEL if name in spec.novel_templates else BASE
        categories.append(CategoryRecord(i + 1, name, OBJECT, None, split))
        for part in TEMPLATES[name].parts:
            parts.append(CategoryRecord(next_part_id, part.name, PART, i + 1, split))
            next_part_id += 1
    return categories + parts


def render_background(height: int, width: int, seed: int, noise: float = 10.0) -> np.ndarray:
    """Low-contrast gray texture: blocky low-frequency field plus pixel noise."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(55.0, 95.0, size=((height + 7) // 8, (width + 7) // 8, 1))
    field_ = np.repeat(np.repeat(coarse, 8, axis=0), 8, axis=1)[:height, :width]
    tint = rng.uniform(-6.0, 6.0, size=(1, 1, 3))
    fine = rng.normal(0.0, noise, size=(height, width, 3))
    return np.clip(field_ + tint + fine, 0, 255).astype(np.uint8)


def render_image(scene: Scene, noise: float = 10.0) -> np.ndarray:
    """Paint each layer's pixels in its color over the textured background."""
    image = render_background(scene.height, scene.width, scene.background_seed, noise)
    for bits, color in scene.layers:
        image[bits] = np.asarray(color, dtype=np.uint8)
    return image


def _overlaps(frame, placed, margin: float) -> bool:
    x, y, w, h = frame
    for px, py, pw, ph in placed:
        if x < px + pw + margin and px < x + w + margin and y < py + ph + margin and py < y + h + margin:
            return True
    return False


def _place(template: ObjectTemplate, spec: SynthSpec, rng: np.random.Generator, placed: list):
    """Sample a frame and rasterize the template's parts, retrying on conflicts."""
    size = spec.image_size
    for _ in range(spec.max_retries):
        fw = rng.uniform(*spec.object_size) * size
        fh = fw * template.aspect * (1.0 + rng.uniform(-spec.aspect_jitter, spec.aspect_jitter))
        if fw > size or fh > size:
            continue
        frame = (rng.uniform(0.0, size - fw), rng.uniform(0.0, size - fh), fw, fh)
        if _overlaps(frame, placed, OBJECT_MARGIN):
            continue
        masks = [rasterize_part(p, frame, size, size) for p in template.parts]
        if any(not m.any() for m in masks):
            continue
        if np.any(np.sum(masks, axis=0) > 1):
            continue
        return frame, masks
    raise SynthesisError(template.name, spec.max_retries, f"{len(placed)} objects already placed")


def generate_scene(
    spec: SynthSpec, split: str, index: int, categories: Sequence[CategoryRecord]
) -> Tuple[Scene, List[AnnotationRecord]]:
    """One image's scene and annotations (local ids starting at 1)."""
    rng = np.random.default_rng([spec.seed, SPLIT_CODES[split], index])
    image_id = index + 1
    size = spec.image_size
    pool = spec.base_templates if split == "train" else spec.templates
    object_ids = {c.name: c.id for c in categories if c.level == OBJECT}
    part_ids = {c.name: c.id for c in categories if c.level == PART}

    scene = Scene(size, size, int(rng.integers(0, 2 ** 31 - 1)))
    annotations: List[AnnotationRecord] = []
    placed = []
    count = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    next_id = 1
    for _ in range(count):
        template = TEMPLATES[pool[int(rng.integers(len(pool)))]]
        frame, masks = _place(template, spec, rng, placed)
        placed.append(frame)
        parts = []
        for shape, bits in zip(template.parts, masks):
            mask = BinaryMask(bits)
            parts.append(
                AnnotationRecord(
                    id=next_id + 1 + len(parts),
                    image_id=image_id,
                    category_id=part_ids[shape.name],
                    box=mask.bounding_box(),
                    level=PART,
                    mask=mask,
                )
            )
            scene.layers.append((bits, shape.color))
        obj, linked = merge_parts_to_object(parts, next_id, object_ids[template.name])
        annotations.append(obj)
        annotations.extend(linked)
        next_id += 1 + len(parts)
    return scene, annotations


def _generate_split(spec: SynthSpec, split: str, count: int, categories, workers: int):
    def _one(index: int):
        scene, annotations = generate_scene(spec, split, index, categories)
        return render_image(scene, spec.background_noise), annotations

    indices = list(range(count))
    if workers <= 1 or count <= 1:
        results = [_one(i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, count)) as executor:
            results = list(executor.map(_one, indices))

    images = [
        ImageRecord(i + 1, spec.image_size, spec.image_size, f"images/{split}/{i:06d}.png")
        for i in indices
    ]
    dataset = HierarchicalDataset(images, categories, renumber_annotations([r[1] for r in results]))
    return validate_dataset(dataset), [r[0] for r in results]


def generate_dataset(spec: SynthSpec, workers: int = 1) -> SynthCorpus:
    """Generate the train and val splits of a corpus.

    Raises:
        SynthesisError: a template could not be placed within max_retries
    """
    categories = corpus_categories(spec)
    train, train_images = _generate_split(spec, "train", spec.train_size, categories, workers)
    val, val_images = _generate_split(spec, "val", spec.val_size, categories, workers)
    logger.info(
        "Generated %d train / %d val images (%d / %d annotations)",
        len(train.images), len(val.images), len(train.annotations), len(val.annotations),
    )
    return SynthCorpus(spec, train, val, {"train": train_images, "val": val_images})


def write_corpus(corpus: SynthCorpus, out_dir: str) -> Dict[str, str]:
    """Write PNG images, train.json, val.json and the spec used.

    Returns:
        dict: split name -> dataset file path
    """
    paths = {}
    for split, dataset in (("train", corpus.train), ("val", corpus.val)):
        for record, pixels in zip(dataset.images, corpus.images[split]):
            path = os.path.join(out_dir, record.file_name)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            Image.fromarray(pixels).save(path, format="PNG")
        paths[split] = os.path.join(out_dir, f"{split}.json")
        save_dataset(dataset, paths[split])
    with open(os.path.join(out_dir, "synth_spec.json"), "w") as f:
        json.dump(corpus.spec.to_dict(), f, indent=2)
    return paths

