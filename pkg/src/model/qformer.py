"""
Querying transformer that parses object queries into part queries.

L universal parsing queries pass M blocks of self-attention (among the L
queries), cross-attention with one object query, and a feed-forward layer,
each residual with post-normalization. Every selected object query is
processed independently, so output block i depends only on object row i and
the parsing queries; the result is laid out as K_top contiguous blocks of L.
"""

import torch
from torch import nn

from src.model.config import ModelConfig


class QFormerBlock(nn.Module):
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

    def forward(self, parse: torch.Tensor, obj: torch.Tensor) -> torch.Tensor:
        """parse: (R, L, C) parsing queries per object; obj: (R, 1, C)."""
        x = self.norm1(parse + self.self_attn(parse, parse, parse, need_weights=False)[0])
        x = self.norm2(x + self.cross_attn(x, obj, obj, need_weights=False)[0])
        return self.norm3(x + self.ffn(x))


class QFormer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_parsing_queries = cfg.num_parsing_queries
        self.use_qformer = cfg.use_qformer
        self.parsing_queries = nn.Parameter(torch.randn(cfg.num_parsing_queries, cfg.channels) * 0.1)
        self.blocks = nn.ModuleList(
            QFormerBlock(cfg.channels, cfg.num_heads, cfg.ffn_dim) for _ in range(cfg.qformer_blocks)
        )

    def forward(self, object_queries: torch.Tensor) -> torch.Tensor:
        """Map (B, K, C) selected object queries to (B, K*L, C) part queries."""
        b, k, c = object_queries.shape
        obj = object_queries.reshape(b * k, 1, c)
        parse = self.parsing_queries.unsqueeze(0).expand(b * k, -1, -1)
        if not self.use_qformer:
            # ablation: no attention, part query = object query + parsing query
            return (obj + parse).reshape(b, k * self.num_parsing_queries, c)
        x = parse
        for block in self.blocks:
            x = block(x, obj)
        return x.reshape(b, k * self.num_parsing_queries, c)


def qformer_parse(qformer: QFormer, selected_object_queries: torch.Tensor) -> torch.Tensor:
    """Part queries for selected object queries ((K, C) or (B, K, C))."""
    if selected_object_queries.dim() == 2:
        return qformer(selected_object_queries.unsqueeze(0)).squeeze(0)
    return qformer(selected_object_queries)
