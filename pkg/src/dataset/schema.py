"""
Hierarchical annotation schema: two-level category taxonomy, annotations
with object/part level and parent links, and whole-dataset validation.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from src.geometry.boxes import BoundingBox
from src.geometry.masks import BinaryMask

OBJECT = "object"
PART = "part"
LEVELS = (OBJECT, PART)

BASE = "base"
NOVEL = "novel"
SPLITS = (BASE, NOVEL)


class DatasetError(Exception):
    """Base class for dataset loading and validation failures."""


class DatasetNotFoundError(DatasetError, FileNotFoundError):
    """The dataset file does not exist."""


class MalformedDatasetError(DatasetError, ValueError):
    """The file is not valid JSON or lacks required structure."""


class DanglingReferenceError(DatasetError):
    """An annotation references an image, category or parent that does not exist."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DatasetValidationError(DatasetError, ValueError):
    """One or more schema invariants are violated."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class UnknownCategoryError(DatasetError, KeyError):
    """Category names that are not part of the dataset."""

    def __init__(self, names: Sequence[str]):
        self.names = sorted(names)
        super().__init__(f"Unknown category names: {', '.join(self.names)}")

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_name: str


@dataclass(frozen=True)
class CategoryRecord:
    id: int
    name: str
    level: str
    parent_object_category_id: Optional[int] = None
    split: str = BASE


@dataclass(frozen=True, eq=False)
class AnnotationRecord:
    id: int
    image_id: int
    category_id: int
    box: BoundingBox
    level: str
    mask: Optional[BinaryMask] = None
    parent_annotation_id: Optional[int] = None

    @property
    def area(self) -> float:
        if self.mask is not None:
            return float(self.mask.area)
        return self.box.area

    def __eq__(self, other) -> bool:
        if not isinstance(other, AnnotationRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.image_id == other.image_id
            and self.category_id == other.category_id
            and self.box == other.box
            and self.level == other.level
            and self.mask == other.mask
            and self.parent_annotation_id == other.parent_annotation_id
        )

    __hash__ = None


@dataclass(frozen=True)
class HierarchicalDataset:
    """Images, a two-level taxonomy and annotations. Treated as immutable."""

    images: Tuple[ImageRecord, ...] = ()
    categories: Tuple[CategoryRecord, ...] = ()
    annotations: Tuple[AnnotationRecord, ...] = ()
    _index: Dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "annotations", tuple(self.annotations))

    @property
    def counts(self) -> Tuple[int, int, int]:
        return len(self.images), len(self.categories), len(self.annotations)

    def _lookup(self, key: str) -> Dict:
        if key not in self._index:
            if key == "images":
                self._index[key] = {img.id: img for img in self.images}
            elif key == "categories":
                self._index[key] = {cat.id: cat for cat in self.categories}
            elif key == "annotations":
                self._index[key] = {ann.id: ann for ann in self.annotations}
            elif key == "by_image":
                grouped: Dict[int, List[AnnotationRecord]] = {img.id: [] for img in self.images}
                for ann in self.annotations:
                    grouped.setdefault(ann.image_id, []).append(ann)
                self._index[key] = grouped
        return self._index[key]

    def image(self, image_id: int) -> ImageRecord:
        return self._lookup("images")[image_id]

    def category(self, category_id: int) -> CategoryRecord:
        return self._lookup("categories")[category_id]

    def annotation(self, annotation_id: int) -> AnnotationRecord:
        return self._lookup("annotations")[annotation_id]

    def annotations_for_image(self, image_id: int) -> List[AnnotationRecord]:
        return list(self._lookup("by_image").get(image_id, []))

    def categories_at(self, level: str) -> List[CategoryRecord]:
        return [c for c in self.categories if c.level == level]

    def category_by_name(self) -> Dict[str, CategoryRecord]:
        return {c.name: c for c in self.categories}


def validate_dataset(dataset: HierarchicalDataset) -> HierarchicalDataset:
    """Check every schema invariant; return the dataset unchanged when valid.

    Raises:
        DanglingReferenceError: annotation image/category/parent ids that do not resolve
        DatasetValidationError: any other violated invariant, with record ids
    """
    problems: List[str] = []
    dangling: List[str] = []

    def _duplicates(records, kind):
        seen = set()
        for rec in records:
            if rec.id in seen:
                problems.append(f"duplicate {kind} id {rec.id}")
            seen.add(rec.id)

    _duplicates(dataset.images, "image")
    _duplicates(dataset.categories, "category")
    _duplicates(dataset.annotations, "annotation")

    images = {img.id: img for img in dataset.images}
    categories = {cat.id: cat for cat in dataset.categories}
    annotations = {ann.id: ann for ann in dataset.annotations}

    for img in dataset.images:
        if img.width <= 0 or img.height <= 0:
            problems.append(f"image {img.id} has non-positive size {img.width}x{img.height}")

    for cat in dataset.categories:
        if cat.level not in LEVELS:
            problems.append(f"category {cat.id} ({cat.name}) has unknown level {cat.level!r}")
        if cat.split not in SPLITS:
            problems.append(f"category {cat.id} ({cat.name}) has unknown split {cat.split!r}")
        if cat.level == PART:
            parent = categories.get(cat.parent_object_category_id)
            if cat.parent_object_category_id is None:
                problems.append(
                    f"part category {cat.id} ({cat.name}) lacks parent_object_category_id"
                )
            elif parent is None or parent.level != OBJECT:
                problems.append(
                    f"part category {cat.id} ({cat.name}) references missing object category "
                    f"{cat.parent_object_category_id}"
                )
        elif cat.level == OBJECT and cat.parent_object_category_id is not None:
            problems.append(f"object category {cat.id} ({cat.name}) must not have a parent category")

    for ann in dataset.annotations:
        image = images.get(ann.image_id)
        category = categories.get(ann.category_id)
        if image is None:
            dangling.append(f"annotation {ann.id} references missing image {ann.image_id}")
        if category is None:
            dangling.append(f"annotation {ann.id} references missing category {ann.category_id}")
        elif ann.level != category.level:
            problems.append(
                f"annotation {ann.id} has level {ann.level!r} but category {category.id} is {category.level!r}"
            )
        if image is not None:
            if ann.box.x2 > image.width or ann.box.y2 > image.height or ann.box.x1 < 0 or ann.box.y1 < 0:
                problems.append(f"annotation {ann.id} box lies outside image {image.id}")
            if ann.mask is not None and ann.mask.shape != (image.height, image.width):
                problems.append(
                    f"annotation {ann.id} mask is {ann.mask.shape}, image {image.id} is "
                    f"{(image.height, image.width)}"
                )
        if ann.parent_annotation_id is not None:
            if ann.level != PART:
                problems.append(f"annotation {ann.id} is object-level but has a parent annotation")
            parent = annotations.get(ann.parent_annotation_id)
            if parent is None:
                dangling.append(
                    f"annotation {ann.id} references missing parent annotation {ann.parent_annotation_id}"
                )
            elif parent.level != OBJECT:
                problems.append(f"annotation {ann.id} parent {parent.id} is not object-level")
            elif parent.image_id != ann.image_id:
                problems.append(f"annotation {ann.id} parent {parent.id} lies on another image")

    if dangling:
        raise DanglingReferenceError(dangling)
    if problems:
        raise DatasetValidationError(problems)
    return dataset
