#!/usr/bin/env python3
"""
Tests for the synthetic corpus generator.
"""

import os
import sys
import tempfile

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
from src.dataset.io import load_dataset, load_image
from src.dataset.schema import BASE, NOVEL, OBJECT, PART
from src.geometry.boxes import enclosing_box
from src.synthdata.generator import (
    SynthesisError,
    SynthSpec,
    corpus_categories,
    generate_dataset,
    write_corpus,
)
from src.synthdata.templates import TEMPLATES, rasterize_part


def small_spec(**kwargs):
    base = dict(image_size=64, train_size=6, val_size=3, objects_per_image=(1, 2))
    base.update(kwargs)
    return SynthSpec(**base)


class TestSynthSpec:
    """Test generator settings validation."""

    def test_unknown_template(self):
        """Test that template names are checked."""
        with pytest.raises(ValueError, match="unknown templates"):
            SynthSpec(templates=("creature", "spaceship"))

    def test_all_novel(self):
        """Test that at least one template stays in training."""
        with pytest.raises(ValueError):
            SynthSpec(templates=("creature",), novel_templates=("creature",))

    def test_object_count_range(self):
        """Test the objects-per-image bounds."""
        with pytest.raises(ValueError):
            SynthSpec(objects_per_image=(3, 1))

    def test_dict_round_trip(self):
        """Test to_dict/from_dict."""
        spec = small_spec(novel_templates=("cart",))
        assert SynthSpec.from_dict(spec.to_dict()) == spec


class TestTemplates:
    """Test template rasterization."""

    def test_parts_are_disjoint(self):
        """Test that every template's parts rasterize without overlap."""
        for template in TEMPLATES.values():
            masks = [rasterize_part(p, (4.0, 4.0, 48.0, 48.0 * template.aspect), 128, 128)
                     for p in template.parts]
            assert all(m.any() for m in masks)
            assert not np.any(np.sum(masks, axis=0) > 1)


class TestGenerateDataset:
    """Test corpus generation."""

    def test_deterministic(self):
        """Test that the same seed gives the same corpus regardless of workers."""
        a = generate_dataset(small_spec(seed=5), workers=1)
        b = generate_dataset(small_spec(seed=5), workers=3)
        assert list(a.train.annotations) == list(b.train.annotations)
        assert list(a.val.annotations) == list(b.val.annotations)
        for x, y in zip(a.images["train"], b.images["train"]):
            assert np.array_equal(x, y)

    def test_seed_changes_corpus(self):
        """Test that a different seed gives different images."""
        a = generate_dataset(small_spec(seed=0))
        b = generate_dataset(small_spec(seed=1))
        assert not all(np.array_equal(x, y) for x, y in zip(a.images["train"], b.images["train"]))

    def test_objects_built_from_parts(self):
        """Test enclosing boxes, union masks and disjoint parts."""
        corpus = generate_dataset(small_spec(train_size=10))
        dataset = corpus.train
        for image in dataset.images:
            annotations = dataset.annotations_for_image(image.id)
            objects = [a for a in annotations if a.level == OBJECT]
            assert objects
            for obj in objects:
                parts = [a for a in annotations if a.parent_annotation_id == obj.id]
                assert len(parts) == len(TEMPLATES[dataset.category(obj.category_id).name].parts)
                assert obj.box == enclosing_box(p.box for p in parts)
                stacked = np.sum([p.mask.bits for p in parts], axis=0)
                assert stacked.max() == 1
                assert np.array_equal(stacked > 0, obj.mask.bits)
            assert all(a.parent_annotation_id is not None for a in annotations if a.level == PART)

    def test_novel_templates_only_in_val(self):
        """Test that train images never show a novel template."""
        spec = small_spec(train_size=12, val_size=12, novel_templates=("cart",))
        corpus = generate_dataset(spec)
        categories = {c.id: c for c in corpus.train.categories}
        train_splits = {categories[a.category_id].split for a in corpus.train.annotations}
        assert train_splits == {BASE}
        assert {c.split for c in categories.values() if c.name.startswith("cart")} == {NOVEL}

    def test_category_layout(self):
        """Test object ids 1..T followed by their parts."""
        categories = corpus_categories(small_spec())
        objects = [c for c in categories if c.level == OBJECT]
        assert [c.id for c in objects] == [1, 2, 3]
        for c in categories:
            if c.level == PART:
                assert c.parent_object_category_id in {o.id for o in objects}

    def test_placement_failure(self):
        """Test a clear error when objects cannot be placed."""
        spec = SynthSpec(
            image_size=32, templates=("creature",), object_size=(1.0, 1.0), aspect_jitter=0.0,
            objects_per_image=(2, 2), train_size=1, val_size=0, max_retries=5,
        )
        with pytest.raises(SynthesisError, match="creature"):
            generate_dataset(spec)


class TestWriteCorpus:
    """Test writing the corpus to disk."""

    def test_files_and_reload(self):
        """Test that written datasets and images load back."""
        corpus = generate_dataset(small_spec(train_size=2, val_size=1))
        with tempfile.TemporaryDirectory() as tmpdir:
            paths = write_corpus(corpus, tmpdir)
            assert os.path.exists(os.path.join(tmpdir, "synth_spec.json"))
            train = load_dataset(paths["train"])
            assert list(train.annotations) == list(corpus.train.annotations)
            pixels = load_image(paths["train"], train.images[0])
            assert np.array_equal(pixels, corpus.images["train"][0])
