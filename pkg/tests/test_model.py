#!/usr/bin/env python3
"""
Tests for the network: configuration, Q-Former routing, heads, the forward
pass, text embeddings and checkpoints.
"""

import math
import os
import sys
import tempfile

import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
from src.dataset.schema import NOVEL, OBJECT, PART, CategoryRecord
from src.model.backbone import BackboneFeatures, EarlyFusion, early_fuse
from src.model.checkpoint import load_checkpoint, save_checkpoint
from src.model.config import FULL_SCALE, ModelConfig
from src.model.heads import MLP, predict_masks, select_topk, similarity_scores
from src.model.network import build_model, downsample_masks
from src.model.qformer import QFormer, qformer_parse
from src.model.text import build_vocabulary, embed_categories, extend_vocabulary


def tiny_config(**kwargs):
    base = dict(channels=16, num_object_queries=8, num_parsing_queries=3, qformer_blocks=1,
                top_k=4, text_dim=8, decoder_layers=1, num_heads=2, ffn_dim=16)
    base.update(kwargs)
    return ModelConfig(**base)


def taxonomy():
    return [
        CategoryRecord(1, "dog", OBJECT),
        CategoryRecord(2, "bus", OBJECT),
        CategoryRecord(3, "dog head", PART, 1),
        CategoryRecord(4, "dog leg", PART, 1),
        CategoryRecord(5, "bus wheel", PART, 2),
        CategoryRecord(6, "cat", OBJECT, split=NOVEL),
        CategoryRecord(7, "cat head", PART, 6, split=NOVEL),
    ]


class TestModelConfig:
    """Test ModelConfig validation and derived sizes."""

    def test_full_scale_part_queries(self):
        """Test that 50 selected objects times 10 parsing queries give 500 part queries."""
        cfg = ModelConfig(**FULL_SCALE)
        assert cfg.num_part_queries == 500

    def test_topk_bound(self):
        """Test that K_top may not exceed the object query count."""
        with pytest.raises(ValueError):
            ModelConfig(num_object_queries=5, top_k=6)

    def test_heads_divide_channels(self):
        """Test that channels must split evenly over heads."""
        with pytest.raises(ValueError):
            ModelConfig(channels=30, num_heads=4)

    def test_dict_round_trip(self):
        """Test to_dict/from_dict."""
        cfg = tiny_config(use_qformer=False)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestQFormer:
    """Test parsing-query routing."""

    def test_output_layout(self):
        """Test (B, K_top*L, C) output at the full routing scale."""
        cfg = tiny_config(num_object_queries=300, top_k=50, num_parsing_queries=10)
        qformer = QFormer(cfg).eval()
        out = qformer(torch.randn(1, 50, cfg.channels))
        assert out.shape == (1, 500, cfg.channels)

    def test_permutation_equivariance(self):
        """Test that permuting object rows permutes the output blocks."""
        torch.manual_seed(0)
        cfg = tiny_config()
        qformer = QFormer(cfg).eval()
        objects = torch.randn(6, cfg.channels)
        perm = torch.tensor([3, 0, 5, 1, 4, 2])
        with torch.no_grad():
            out = qformer_parse(qformer, objects).reshape(6, cfg.num_parsing_queries, -1)
            permuted = qformer_parse(qformer, objects[perm]).reshape(6, cfg.num_parsing_queries, -1)
        assert torch.allclose(permuted, out[perm], atol=1e-6)

    def test_blocks_are_independent(self):
        """Test that changing one object row only changes its own block."""
        torch.manual_seed(1)
        cfg = tiny_config()
        qformer = QFormer(cfg).eval()
        objects = torch.randn(1, 4, cfg.channels)
        changed = objects.clone()
        changed[0, 2] += 1.0
        with torch.no_grad():
            a = qformer(objects).reshape(4, cfg.num_parsing_queries, -1)
            b = qformer(changed).reshape(4, cfg.num_parsing_queries, -1)
        for i in (0, 1, 3):
            assert torch.equal(a[i], b[i])
        assert not torch.allclose(a[2], b[2])

    def test_ablation_adds_queries(self):
        """Test that without attention a part query is object plus parsing query."""
        cfg = tiny_config(use_qformer=False)
        qformer = QFormer(cfg)
        objects = torch.randn(1, 2, cfg.channels)
        out = qformer(objects).reshape(2, cfg.num_parsing_queries, -1)
        expected = objects[0].unsqueeze(1) + qformer.parsing_queries.unsqueeze(0)
        assert torch.allclose(out, expected)


class TestHeads:
    """Test classification scoring and top-k selection."""

    def test_similarity_shape(self):
        """Test (B, R, K) logits."""
        logits = similarity_scores(torch.randn(2, 5, 16), torch.randn(16, 8), torch.randn(3, 8))
        assert logits.shape == (2, 5, 3)

    def test_similarity_mismatch(self):
        """Test that inconsistent widths are rejected."""
        with pytest.raises(ValueError):
            similarity_scores(torch.randn(2, 5, 16), torch.randn(12, 8), torch.randn(3, 8))

    def test_similarity_matches_dot_products(self):
        """Test each logit against an explicit projected dot product."""
        torch.manual_seed(2)
        queries, w_proj, text = torch.randn(2, 5, 16), torch.randn(16, 8), torch.randn(3, 8)
        logits = similarity_scores(queries, w_proj, text)
        for b in range(2):
            for r in range(5):
                projected = [sum(float(queries[b, r, c]) * float(w_proj[c, d]) for c in range(16)) for d in range(8)]
                for k in range(3):
                    expected = sum(projected[d] * float(text[k, d]) for d in range(8))
                    assert float(logits[b, r, k]) == pytest.approx(expected, abs=1e-4)

    def test_predict_masks_per_pixel(self):
        """Test mask logits as a per-pixel dot product, with and without an FFN."""
        torch.manual_seed(3)
        queries, pixel_map = torch.randn(2, 3, 4), torch.randn(2, 4, 5, 6)
        masks = predict_masks(queries, pixel_map)
        assert masks.shape == (2, 3, 5, 6)
        for b in range(2):
            for r in range(3):
                for y in range(5):
                    for x in range(6):
                        expected = sum(float(queries[b, r, c]) * float(pixel_map[b, c, y, x]) for c in range(4))
                        assert float(masks[b, r, y, x]) == pytest.approx(expected, abs=1e-5)
        ffn = MLP(4, 8, 4)
        with torch.no_grad():
            assert torch.allclose(predict_masks(queries, pixel_map, ffn), predict_masks(ffn(queries), pixel_map))

    def test_topk_ties_prefer_lower_index(self):
        """Test stable selection among equal scores."""
        scores = torch.tensor([[[0.5], [0.9], [0.5], [0.9]]])
        queries = torch.arange(4, dtype=torch.float32).reshape(1, 4, 1)
        selected, slots = select_topk(scores, queries, 3)
        assert slots.tolist() == [[1, 3, 0]]
        assert selected.flatten().tolist() == [1.0, 3.0, 0.0]

    def test_topk_too_many(self):
        """Test that asking for more rows than exist fails."""
        with pytest.raises(ValueError):
            select_topk(torch.zeros(1, 2, 1), torch.zeros(1, 2, 4), 3)


class TestForward:
    """Test the full forward pass on a tiny configuration."""

    def setup_method(self):
        self.cfg = tiny_config()
        self.vocab = build_vocabulary(taxonomy(), self.cfg.text_dim, include_novel=False)
        self.model = build_model(self.cfg).eval()
        torch.manual_seed(0)
        self.images = torch.rand(2, 3, 64, 64)

    def test_shapes(self):
        """Test the sizes of every prediction tensor."""
        with torch.no_grad():
            preds = self.model(self.images, self.vocab.object_text.embeddings, self.vocab.part_text.embeddings)
        n, parts = self.cfg.num_object_queries, self.cfg.num_part_queries
        assert preds.object.logits.shape == (2, n, 2)
        assert preds.object.boxes.shape == (2, n, 4)
        assert preds.object.masks.shape == (2, n, 16, 16)
        assert preds.part.logits.shape == (2, parts, 3)
        assert preds.part.masks.shape == (2, parts, 16, 16)
        assert preds.selected_slots.shape == (2, self.cfg.top_k)
        assert preds.proposals.logits.shape == (2, n, 2)
        assert bool(((preds.object.boxes > 0) & (preds.object.boxes < 1)).all())

    def test_part_slots_follow_selection(self):
        """Test that part rows come in contiguous blocks per selected object."""
        with torch.no_grad():
            preds = self.model(self.images, self.vocab.object_text.embeddings, self.vocab.part_text.embeddings)
        blocks = preds.part.slots.reshape(2, self.cfg.top_k, self.cfg.num_parsing_queries)
        assert torch.equal(blocks, preds.selected_slots.unsqueeze(-1).expand_as(blocks))

    def test_image_size_multiple(self):
        """Test that sides must be multiples of the coarsest stride."""
        with pytest.raises(ValueError):
            self.model(torch.rand(1, 3, 60, 64), self.vocab.object_text.embeddings,
                       self.vocab.part_text.embeddings)

    def test_fresh_fusion_is_identity(self):
        """Test that untrained early fusion leaves the backbone maps unchanged."""
        with torch.no_grad():
            features = self.model.backbone(self.images)
            fused = early_fuse(self.model.fusion, features, self.vocab.object_text.embeddings)
        assert fused.scales == features.scales
        for s in features.scales:
            assert torch.allclose(fused.maps[s], features.maps[s])

    def test_fusion_matches_explicit_attention(self):
        """Test trained early fusion against attention written out token by token."""
        torch.manual_seed(4)
        fusion = EarlyFusion(4, 3)
        with torch.no_grad():
            for layer in (fusion.t_out, fusion.i_out):
                layer.weight.normal_()
                layer.bias.normal_()
        features = BackboneFeatures({2: torch.randn(1, 4, 2, 2), 3: torch.randn(1, 4, 1, 1)})
        text = torch.randn(2, 3)
        with torch.no_grad():
            fused = early_fuse(fusion, features, text)
            image = [features.maps[2][0, :, y, x] for y in range(2) for x in range(2)]
            image.append(features.maps[3][0, :, 0, 0])

            def attend(query, keys, values):
                scores = [math.exp(float(query @ k) / 2.0) for k in keys]
                total = sum(scores)
                return sum((s / total) * v for s, v in zip(scores, values))

            rows = []
            for t in text:
                row = fusion.text_in(t)
                mixed = attend(fusion.t_q(row), [fusion.t_k(p) for p in image], [fusion.t_v(p) for p in image])
                rows.append(row + fusion.t_out(mixed))
            expected = []
            for p in image:
                mixed = attend(fusion.i_q(p), [fusion.i_k(r) for r in rows], [fusion.i_v(r) for r in rows])
                expected.append(p + fusion.i_out(mixed))
        got = [fused.maps[2][0, :, y, x] for y in range(2) for x in range(2)] + [fused.maps[3][0, :, 0, 0]]
        for g, e in zip(got, expected):
            assert torch.allclose(g, e, atol=1e-5)
        assert not torch.allclose(fused.maps[2], features.maps[2])

    def test_gradient_reaches_parsing_queries(self):
        """Test that part-level outputs back-propagate into the parsing queries."""
        model = build_model(self.cfg).train()
        preds = model(self.images, self.vocab.object_text.embeddings, self.vocab.part_text.embeddings)
        (preds.part.logits.sum() + preds.part.masks.sum() + preds.part.boxes.sum()).backward()
        grad = model.qformer.parsing_queries.grad
        assert grad is not None
        assert torch.isfinite(grad).all()
        assert float(grad.abs().sum()) > 0

    def test_decoder_runs_every_layer(self):
        """Test that ground-truth conditioned object decoding passes through every decoder layer."""
        model = build_model(tiny_config(decoder_layers=2)).eval()
        calls = []
        for i, layer in enumerate(model.object_decoder.layers):
            layer.register_forward_hook(lambda module, args, out, i=i: calls.append(i))
        with torch.no_grad():
            features = model.backbone(self.images)
            pixel_map = model.pixel_embedding(features)
            masks = torch.zeros((2, 1) + tuple(pixel_map.shape[-2:]))
            masks[:, :, 2:6, 2:6] = 1
            boxes = torch.tensor([0.25, 0.25, 0.2, 0.2]).expand(2, 1, 4)
            _, objects = model.objects_from_masks(features, pixel_map, masks, boxes,
                                                  self.vocab.object_text.embeddings)
        assert calls == [0, 1]
        assert objects.boxes.shape == (2, 1, 4)

    def test_build_is_deterministic(self):
        """Test equal weights from equal seeds and an untouched global generator."""
        before = torch.random.get_rng_state()
        a = build_model(self.cfg).state_dict()
        b = build_model(self.cfg).state_dict()
        assert torch.equal(before, torch.random.get_rng_state())
        assert all(torch.equal(a[k], b[k]) for k in a)
        c = build_model(tiny_config(seed=1)).state_dict()
        assert not all(torch.equal(a[k], c[k]) for k in a)

    def test_downsample_masks(self):
        """Test area-average thresholding to the pixel map size."""
        masks = torch.zeros(1, 1, 8, 8)
        masks[0, 0, :4, :4] = 1
        small = downsample_masks(masks, (2, 2))
        assert small[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


class TestText:
    """Test category embeddings and vocabularies."""

    def test_unit_rows_and_determinism(self):
        """Test unit-norm rows that depend only on name and seed."""
        names = [f"category {i}" for i in range(100)]
        a = embed_categories(names, 64, seed=3)
        b = embed_categories(list(reversed(names)), 64, seed=3)
        assert torch.allclose(a.embeddings.norm(dim=1), torch.ones(100), atol=1e-5)
        assert torch.equal(a.embeddings, b.embeddings.flip(0))
        cos = a.embeddings @ a.embeddings.T
        off = cos[~torch.eye(100, dtype=torch.bool)]
        assert float(off.abs().max()) < 0.5

    def test_override_width(self):
        """Test that an override row of the wrong width is rejected."""
        with pytest.raises(ValueError):
            embed_categories(["dog"], 4, overrides={"dog": [1.0, 0.0]})

    def test_override_used_verbatim(self):
        """Test that override rows replace generated ones."""
        m = embed_categories(["dog", "bus"], 2, overrides={"dog": [0.0, 2.0]})
        assert m.embeddings[0].tolist() == [0.0, 2.0]

    def test_vocabulary_levels(self):
        """Test per-level vocabularies and the base-only training view."""
        vocab = build_vocabulary(taxonomy(), 8, include_novel=False)
        assert vocab.object_ids == [1, 2]
        assert vocab.part_ids == [3, 4, 5]
        assert vocab.part_rows_for_object(1) == [0, 1]
        assert vocab.part_rows_for_object(2) == [2]

    def test_extend_keeps_trained_rows(self):
        """Test that the evaluation vocabulary reuses rows of known names."""
        trained = build_vocabulary(taxonomy(), 8, include_novel=False)
        trained.part_text.embeddings[0] = torch.full((8,), 0.5)
        full = extend_vocabulary(trained, taxonomy())
        assert full.object_ids == [1, 2, 6]
        assert full.part_ids == [3, 4, 5, 7]
        assert torch.equal(full.part_text.embeddings[0], torch.full((8,), 0.5))


class TestCheckpoint:
    """Test checkpoint save and load."""

    def test_round_trip(self):
        """Test that a reloaded model predicts the same outputs."""
        cfg = tiny_config()
        vocab = build_vocabulary(taxonomy(), cfg.text_dim, include_novel=False)
        model = build_model(cfg).eval()
        images = torch.rand(1, 3, 32, 32)
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, "ckpt", "model.pt")
            save_checkpoint(path, model, vocab, iteration=7, extra={"note": "x"})
            loaded, loaded_vocab, info = load_checkpoint(path)
        assert info == {"note": "x", "iteration": 7}
        assert loaded_vocab.part_ids == vocab.part_ids
        with torch.no_grad():
            a = model(images, vocab.object_text.embeddings, vocab.part_text.embeddings)
            b = loaded(images, loaded_vocab.object_text.embeddings, loaded_vocab.part_text.embeddings)
        assert torch.equal(a.part.logits, b.part.logits)

    def test_missing_file(self):
        """Test a clear error for a missing checkpoint."""
        with pytest.raises(FileNotFoundError):
            load_checkpoint("/nonexistent/model.pt")
