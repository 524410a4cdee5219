"""
Prediction heads shared by the object and part levels.

- similarity_scores: S = (q W_proj) T^T, raw logits
- predict_masks: per-pixel dot product of FFN(q) with the pixel embedding map
- select_topk: highest-scoring query rows, ties to the lower row index
"""

from typing import Tuple

import torch
from torch import nn


class MLP(nn.Module):
    """Feed-forward stack with ReLU between layers."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, num_layers: int = 3):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


def similarity_scores(queries: torch.Tensor, w_proj: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """Classification logits against a text embedding matrix.

    Args:
        queries: (..., C) query rows
        w_proj: (C, D) projection
        text: (K, D) category embeddings

    Returns:
        (..., K) raw logits
    """
    if queries.shape[-1] != w_proj.shape[0] or w_proj.shape[1] != text.shape[-1]:
        raise ValueError(
            f"dimension mismatch: queries {tuple(queries.shape)}, W_proj {tuple(w_proj.shape)}, "
            f"text {tuple(text.shape)}"
        )
    return (queries @ w_proj) @ text.transpose(0, 1)


def predict_masks(queries: torch.Tensor, pixel_map: torch.Tensor, ffn: nn.Module = None) -> torch.Tensor:
    """Mask logits m = FFN(q) . M_p per pixel.

    Args:
        queries: (B, R, C)
        pixel_map: (B, C, h, w)
        ffn: mapping applied to the queries first (identity when None)

    Returns:
        (B, R, h, w) logits
    """
    embed = queries if ffn is None else ffn(queries)
    return torch.einsum("brc,bchw->brhw", embed, pixel_map)


def select_topk(scores: torch.Tensor, queries: torch.Tensor, k: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Pick the k query rows with the highest max-over-categories score.

    Args:
        scores: (B, N, K) similarity logits
        queries: (B, N, C)
        k: rows to keep

    Returns:
        tuple: ((B, k, C) selected queries, (B, k) slot indices into the N rows)

    Raises:
        ValueError: if k exceeds N
    """
    n = queries.shape[1]
    if k > n:
        raise ValueError(f"cannot select top {k} of {n} object queries")
    if scores.shape[-1] == 0:
        best = torch.zeros(scores.shape[:2], dtype=queries.dtype, device=queries.device)
    else:
        best = scores.max(dim=-1).values
    # stable sort keeps the lower index first among equal scores
    order = torch.sort(-best, dim=1, stable=True).indices[:, :k]
    selected = torch.gather(queries, 1, order.unsqueeze(-1).expand(-1, -1, queries.shape[-1]))
    return selected, order
