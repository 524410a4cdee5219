"""
Base/novel category splitting for the cross-category protocol.
"""

import dataclasses
from typing import Iterable, Set, Tuple

from src.dataset.schema import (
    NOVEL,
    HierarchicalDataset,
    UnknownCategoryError,
)


def novel_names_from_splits(dataset: HierarchicalDataset) -> Set[str]:
    """Names of categories already labelled novel in the file."""
    return {c.name for c in dataset.categories if c.split == NOVEL}


def dropped_annotation_ids(dataset: HierarchicalDataset, category_ids: Set[int]) -> Set[int]:
    """Ids of annotations in the given categories plus all their descendants."""
    dropped = {a.id for a in dataset.annotations if a.category_id in category_ids}
    grew = True
    while grew:
        grew = False
        for a in dataset.annotations:
            if a.id not in dropped and a.parent_annotation_id in dropped:
                dropped.add(a.id)
                grew = True
    return dropped


def split_base_novel(
    dataset: HierarchicalDataset, novel_names: Iterable[str]
) -> Tuple[HierarchicalDataset, HierarchicalDataset]:
    """Produce a training view without novel annotations and a full eval view.

    Both views share the input's image list and record objects; the input is
    never mutated and no kept record is rewritten. Named categories are
    labelled `novel` in both views. Annotations of a named category are
    dropped from the training view together with every annotation whose
    parent was dropped.

    Args:
        dataset: Source dataset
        novel_names: Category names to hold out of training

    Returns:
        tuple: (train view, eval view)

    Raises:
        UnknownCategoryError: if a name is not a category of the dataset
    """
    novel_names = set(novel_names)
    known = {c.name for c in dataset.categories}
    unknown = novel_names - known
    if unknown:
        raise UnknownCategoryError(unknown)
    if not novel_names:
        return dataset, dataset

    categories = tuple(
        dataclasses.replace(c, split=NOVEL) if c.name in novel_names else c
        for c in dataset.categories
    )
    novel_ids = {c.id for c in categories if c.name in novel_names}

    dropped = dropped_annotation_ids(dataset, novel_ids)
    train_annotations = tuple(a for a in dataset.annotations if a.id not in dropped)
    train = HierarchicalDataset(dataset.images, categories, train_annotations)
    evaluation = HierarchicalDataset(dataset.images, categories, dataset.annotations)
    return train, evaluation
