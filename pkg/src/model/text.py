"""
Category-name embeddings standing in for a pretrained text encoder.

Each name maps to a unit vector drawn from a generator keyed by
(seed, sentence). With prompt templates, a name's row is the normalized mean
of its per-sentence vectors. An override file (JSON: name -> list of D
floats) replaces generated rows verbatim, which is how real encoder outputs
are plugged in.
"""

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch


@dataclass
class TextEmbeddingMatrix:
    names: List[str]
    embeddings: torch.Tensor  # (K, D)
    trainable: bool = False

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return len(self.names)

    def subset(self, names: Sequence[str]) -> "TextEmbeddingMatrix":
        index = {n: i for i, n in enumerate(self.names)}
        rows = [index[n] for n in names]
        return TextEmbeddingMatrix(list(names), self.embeddings[rows], self.trainable)


def _sentence_vector(sentence: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{sentence}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def load_embedding_overrides(path: str) -> Dict[str, List[float]]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Embedding override file not found: {path}")
    with open(path, "r") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path} must map category names to vectors")
    return data


def embed_categories(
    names: Sequence[str],
    dim: int,
    seed: int = 0,
    overrides: Optional[Dict[str, Sequence[float]]] = None,
    templates: Optional[Sequence[str]] = None,
    trainable: bool = False,
) -> TextEmbeddingMatrix:
    """Build the K x D text embedding matrix for a vocabulary.

    Args:
        names: Category names, one row each
        dim: Embedding width D
        seed: Generator seed
        overrides: Optional name -> vector rows that replace generated ones
        templates: Optional prompt templates with one `{}` slot
        trainable: Whether the matrix should receive gradients

    Returns:
        TextEmbeddingMatrix

    Raises:
        ValueError: empty vocabulary or an override row of the wrong width
    """
    names = list(names)
    if not names:
        raise ValueError("embed_categories needs at least one category name")
    overrides = overrides or {}
    rows = []
    for name in names:
        if name in overrides:
            row = np.asarray(overrides[name], dtype=np.float64)
            if row.shape != (dim,):
                raise ValueError(
                    f"override for {name!r} has width {row.size}, expected {dim}"
                )
        elif templates:
            row = np.mean([_sentence_vector(t.format(name), dim, seed) for t in templates], axis=0)
            row = row / np.linalg.norm(row)
        else:
            row = _sentence_vector(name, dim, seed)
        rows.append(row)
    embeddings = torch.tensor(np.stack(rows), dtype=torch.float32)
    if trainable:
        embeddings.requires_grad_(True)
    return TextEmbeddingMatrix(names, embeddings, trainable)


@dataclass
class Vocabulary:
    """Per-level category vocabularies with their text embedding matrices.

    Object rows are scored against object categories only and part rows
    against part categories only. Row i of a matrix is category id
    `object_ids[i]` / `part_ids[i]`.
    """

    object_ids: List[int]
    object_text: TextEmbeddingMatrix
    part_ids: List[int]
    part_text: TextEmbeddingMatrix
    part_parents: Dict[int, int]  # part category id -> object category id

    def object_row(self, category_id: int) -> int:
        return self.object_ids.index(category_id)

    def part_row(self, category_id: int) -> int:
        return self.part_ids.index(category_id)

    def part_rows_for_object(self, object_category_id: int) -> List[int]:
        return [
            i for i, cid in enumerate(self.part_ids) if self.part_parents.get(cid) == object_category_id
        ]

    def to_dict(self) -> Dict:
        return {
            "object_ids": list(self.object_ids),
            "object_names": list(self.object_text.names),
            "object_embeddings": self.object_text.embeddings.detach().cpu(),
            "part_ids": list(self.part_ids),
            "part_names": list(self.part_text.names),
            "part_embeddings": self.part_text.embeddings.detach().cpu(),
            "part_parents": dict(self.part_parents),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Vocabulary":
        return cls(
            object_ids=list(data["object_ids"]),
            object_text=TextEmbeddingMatrix(list(data["object_names"]), data["object_embeddings"]),
            part_ids=list(data["part_ids"]),
            part_text=TextEmbeddingMatrix(list(data["part_names"]), data["part_embeddings"]),
            part_parents={int(k): int(v) for k, v in data["part_parents"].items()},
        )


def build_vocabulary(
    categories,
    dim: int,
    seed: int = 0,
    overrides: Optional[Dict[str, Sequence[float]]] = None,
    templates: Optional[Sequence[str]] = None,
    include_novel: bool = True,
    trainable: bool = False,
) -> Vocabulary:
    """Embed the object and part categories of a dataset taxonomy.

    Args:
        categories: CategoryRecord sequence
        include_novel: False keeps only base categories (training vocabulary)
        trainable: Mark both text matrices for fine-tuning

    Raises:
        ValueError: if either level ends up empty
    """
    active = [c for c in categories if include_novel or c.split != "novel"]
    objects = sorted((c for c in active if c.level == "object"), key=lambda c: c.id)
    parts = sorted((c for c in active if c.level == "part"), key=lambda c: c.id)
    if not objects or not parts:
        raise ValueError(
            f"vocabulary needs object and part categories, got {len(objects)} and {len(parts)}"
        )
    return Vocabulary(
        object_ids=[c.id for c in objects],
        object_text=embed_categories([c.name for c in objects], dim, seed, overrides, templates, trainable),
        part_ids=[c.id for c in parts],
        part_text=embed_categories([c.name for c in parts], dim, seed, overrides, templates, trainable),
        part_parents={c.id: c.parent_object_category_id for c in parts},
    )


def extend_vocabulary(
    trained: Vocabulary,
    categories,
    seed: int = 0,
    overrides: Optional[Dict[str, Sequence[float]]] = None,
    templates: Optional[Sequence[str]] = None,
) -> Vocabulary:
    """Full evaluation vocabulary that keeps the trained rows of known names."""
    full = build_vocabulary(categories, trained.object_text.dim, seed, overrides, templates, include_novel=True)
    for level in ("object_text", "part_text"):
        source = getattr(trained, level)
        target = getattr(full, level)
        known = {name: i for i, name in enumerate(source.names)}
        rows = target.embeddings.detach().clone()
        for j, name in enumerate(target.names):
            if name in known:
                rows[j] = source.embeddings[known[name]].detach()
        setattr(full, level, TextEmbeddingMatrix(target.names, rows, source.trainable))
    return full
