"""
The hierarchical parser network.

Forward pass:
    image -> backbone maps (strides 4..32) -> optional early fusion with the
    category text -> pixel embedding map M_p (stride 4)
    stage 1: score every encoder token, keep the N best as proposals
    stage 2: object decoder refines the N queries; class/box/mask heads
    top-K_top object queries -> Q-Former -> K_top*L part queries
    part decoder (references = generating object boxes); class/box/mask heads

Boxes are normalized cxcywh, regressed as sigmoid(inverse_sigmoid(ref) + delta).
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from src.model.backbone import (
    BackboneFeatures,
    EarlyFusion,
    PixelEmbedding,
    ToyBackbone,
    check_image_size,
    early_fuse,
)
from src.model.box_ops import inverse_sigmoid
from src.model.config import ModelConfig
from src.model.heads import MLP, predict_masks, select_topk, similarity_scores
from src.model.qformer import QFormer


@dataclass
class LevelPredictions:
    logits: torch.Tensor                  # (B, R, K)
    boxes: torch.Tensor                   # (B, R, 4) normalized cxcywh
    masks: Optional[torch.Tensor] = None  # (B, R, H/4, W/4) logits
    slots: Optional[torch.Tensor] = None  # (B, R) generating object slot (parts only)

    @property
    def num_rows(self) -> int:
        return self.logits.shape[1]


@dataclass
class PredictionSet:
    object: LevelPredictions
    part: LevelPredictions
    proposals: Optional[LevelPredictions] = None
    selected_slots: Optional[torch.Tensor] = None  # (B, K_top)


def sine_embedding(coords: torch.Tensor, channels: int, temperature: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (..., d) coordinates in [0, 1] to (..., channels)."""
    d = coords.shape[-1]
    per = channels // (2 * d)
    freqs = temperature ** (torch.arange(per, device=coords.device, dtype=coords.dtype) / max(per, 1))
    angles = coords.unsqueeze(-1) * 2 * math.pi / freqs
    emb = torch.cat([angles.sin(), angles.cos()], dim=-1).flatten(-2)
    if emb.shape[-1] < channels:
        emb = F.pad(emb, (0, channels - emb.shape[-1]))
    return emb


class DecoderLayer(nn.Module):
    def __init__(self, channels: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(channels, num_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(channels)
        self.cross_attn = nn.MultiheadAttention(channels, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, channels)
        )
        self.norm3 = nn.LayerNorm(channels)

    def forward(self, q, q_pos, memory, memory_pos):
        x = q + q_pos
        q = self.norm1(q + self.self_attn(x, x, q, need_weights=False)[0])
        q = self.norm2(q + self.cross_attn(q + q_pos, memory + memory_pos, memory, need_weights=False)[0])
        return self.norm3(q + self.ffn(q))


class BoxRefiningDecoder(nn.Module):
    """Decoder stack with per-layer reference box refinement."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.channels
        self.channels = c
        self.layers = nn.ModuleList(
            DecoderLayer(c, cfg.num_heads, cfg.ffn_dim) for _ in range(cfg.decoder_layers)
        )
        self.ref_pos = MLP(c, c, c, num_layers=2)
        self.box_head = MLP(c, c, 4)
        nn.init.zeros_(self.box_head.layers[-1].weight)
        nn.init.zeros_(self.box_head.layers[-1].bias)

    def forward(self, queries, references, memory, memory_pos):
        ref = references.detach()
        boxes = ref
        for layer in self.layers:
            q_pos = self.ref_pos(sine_embedding(ref, self.channels))
            queries = layer(queries, q_pos, memory, memory_pos)
            boxes = torch.sigmoid(inverse_sigmoid(ref) + self.box_head(queries))
            ref = boxes.detach()
        return queries, boxes


class PartParser(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c, d = cfg.channels, cfg.text_dim
        self.backbone = ToyBackbone(cfg)
        self.pixel_embedding = PixelEmbedding(cfg)
        self.fusion = EarlyFusion(c, d) if cfg.early_fusion else None
        self.level_embed = nn.Parameter(torch.zeros(len(cfg.scales), c))

        # stage 1: encoder proposals
        self.enc_output = nn.Sequential(nn.Linear(c, c), nn.LayerNorm(c))
        self.enc_w_proj = nn.Parameter(torch.randn(c, d) / math.sqrt(c))
        self.enc_box = MLP(c, c, 4)
        self.query_init = nn.Sequential(nn.Linear(c, c), nn.LayerNorm(c))

        # object level
        self.object_decoder = BoxRefiningDecoder(cfg)
        self.object_w_proj = nn.Parameter(torch.randn(c, d) / math.sqrt(c))
        self.object_mask_ffn = MLP(c, c, c)

        # part level
        self.qformer = QFormer(cfg)
        self.part_decoder = BoxRefiningDecoder(cfg)
        self.part_w_proj = nn.Parameter(torch.randn(c, d) / math.sqrt(c))
        self.part_mask_ffn = MLP(c, c, c)

    # ---- encoding -------------------------------------------------------

    def encode_image(
        self, images: torch.Tensor, text: Optional[torch.Tensor] = None
    ) -> Tuple[BackboneFeatures, torch.Tensor]:
        """Backbone maps (optionally fused with text) and the pixel embedding map."""
        check_image_size(images.shape[-2], images.shape[-1], self.cfg)
        features = self.backbone(images)
        if self.fusion is not None and text is not None:
            features = early_fuse(self.fusion, features, text)
        return features, self.pixel_embedding(features)

    def memory(self, features: BackboneFeatures):
        """Flattened tokens, their positional embeddings and anchor boxes."""
        tokens, pos, anchors = [], [], []
        for i, s in enumerate(features.scales):
            fmap = features.maps[s]
            b, c, h, w = fmap.shape
            ys = (torch.arange(h, device=fmap.device, dtype=fmap.dtype) + 0.5) / h
            xs = (torch.arange(w, device=fmap.device, dtype=fmap.dtype) + 0.5) / w
            cy, cx = torch.meshgrid(ys, xs, indexing="ij")
            centers = torch.stack([cx.flatten(), cy.flatten()], dim=-1)
            size = torch.full_like(centers, 0.05 * 2 ** i)
            anchor = torch.cat([centers, size], dim=-1)
            tokens.append(fmap.flatten(2).transpose(1, 2))
            pos.append((sine_embedding(centers, c) + self.level_embed[i]).unsqueeze(0).expand(b, -1, -1))
            anchors.append(anchor.unsqueeze(0).expand(b, -1, -1))
        return torch.cat(tokens, 1), torch.cat(pos, 1), torch.cat(anchors, 1)

    # ---- object level ---------------------------------------------------

    def object_heads(self, queries, boxes, pixel_map, object_text) -> LevelPredictions:
        return LevelPredictions(
            logits=similarity_scores(queries, self.object_w_proj, object_text),
            boxes=boxes,
            masks=predict_masks(queries, pixel_map, self.object_mask_ffn),
        )

    def decode_objects(self, features, pixel_map, object_text):
        """Two-stage object decoding.

        Returns:
            tuple: (object queries (B, N, C), object LevelPredictions, proposal LevelPredictions)
        """
        memory, memory_pos, anchors = self.memory(features)
        n = self.cfg.num_object_queries
        if memory.shape[1] < n:
            raise ValueError(f"{memory.shape[1]} encoder tokens cannot seed {n} object queries")
        enc = self.enc_output(memory)
        enc_logits = similarity_scores(enc, self.enc_w_proj, object_text)
        enc_boxes = torch.sigmoid(inverse_sigmoid(anchors) + self.enc_box(enc))
        _, slots = select_topk(enc_logits, enc, n)

        def gather(t):
            return torch.gather(t, 1, slots.unsqueeze(-1).expand(-1, -1, t.shape[-1]))

        proposals = LevelPredictions(logits=gather(enc_logits), boxes=gather(enc_boxes))
        queries = self.query_init(gather(enc))
        queries, boxes = self.object_decoder(queries, gather(enc_boxes), memory, memory_pos)
        return queries, self.object_heads(queries, boxes, pixel_map, object_text), proposals

    # ---- part level -----------------------------------------------------

    def parse_parts(self, selected_queries, parent_boxes, features, pixel_map, part_text, slots):
        """Q-Former parsing plus the part decoder for (B, K, C) selected object queries."""
        memory, memory_pos, _ = self.memory(features)
        num_parse = self.cfg.num_parsing_queries
        part_queries = self.qformer(selected_queries)
        references = parent_boxes.repeat_interleave(num_parse, dim=1)
        part_queries, part_boxes = self.part_decoder(part_queries, references, memory, memory_pos)
        return LevelPredictions(
            logits=similarity_scores(part_queries, self.part_w_proj, part_text),
            boxes=part_boxes,
            masks=predict_masks(part_queries, pixel_map, self.part_mask_ffn),
            slots=slots.repeat_interleave(num_parse, dim=1),
        )

    def forward(self, images: torch.Tensor, object_text: torch.Tensor, part_text: torch.Tensor) -> PredictionSet:
        fusion_text = torch.cat([object_text, part_text], dim=0)
        features, pixel_map = self.encode_image(images, fusion_text)
        queries, objects, proposals = self.decode_objects(features, pixel_map, object_text)
        selected, slots = select_topk(objects.logits, queries, self.cfg.top_k)
        parent_boxes = torch.gather(objects.boxes, 1, slots.unsqueeze(-1).expand(-1, -1, 4))
        parts = self.parse_parts(selected, parent_boxes, features, pixel_map, part_text, slots)
        return PredictionSet(object=objects, part=parts, proposals=proposals, selected_slots=slots)

    # ---- ground-truth conditioned parsing --------------------------------

    def objects_from_masks(
        self, features, pixel_map, masks: torch.Tensor, boxes: torch.Tensor, object_text
    ) -> Tuple[torch.Tensor, LevelPredictions]:
        """Object queries from mask-pooled pixel embeddings plus one decoder pass.

        Args:
            masks: (B, G, h, w) binary masks at pixel-map resolution
            boxes: (B, G, 4) normalized cxcywh object boxes
        """
        weights = masks.float()
        pooled = torch.einsum("bghw,bchw->bgc", weights, pixel_map)
        pooled = pooled / weights.flatten(2).sum(-1).clamp(min=1.0).unsqueeze(-1)
        memory, memory_pos, _ = self.memory(features)
        queries = self.query_init(pooled)
        queries, refined = self.object_decoder(queries, boxes, memory, memory_pos)
        return queries, self.object_heads(queries, refined, pixel_map, object_text)


def build_model(cfg: ModelConfig) -> PartParser:
    """Construct a model with weights drawn from the config seed."""
    generator_state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed)
    try:
        model = PartParser(cfg)
    finally:
        torch.random.set_rng_state(generator_state)
    return model


def downsample_masks(masks: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Area-average full-resolution masks to `size` and threshold at one half."""
    if masks.numel() == 0:
        return masks.new_zeros(masks.shape[:-2] + tuple(size)).float()
    return (F.adaptive_avg_pool2d(masks.float(), size) >= 0.5).float()
