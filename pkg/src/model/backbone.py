"""
Toy image encoder: a stride-2 stem plus four stride-2 stages producing maps
at strides 4, 8, 16 and 32, a top-down multi-scale mixer, the stride-4 pixel
embedding map, and text/image early fusion.

Convolutions use replicate padding and upsampling is nearest-neighbour, so a
constant image yields constant feature maps.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch
import torch.nn.functional as F
from torch import nn

from src.model.config import ModelConfig


@dataclass
class BackboneFeatures:
    """Feature maps keyed by scale s (stride 2**s), each (B, C, H/2**s, W/2**s)."""

    maps: Dict[int, torch.Tensor]

    @property
    def scales(self) -> List[int]:
        return sorted(self.maps)

    def flatten(self) -> torch.Tensor:
        """(B, sum of H_s*W_s, C) tokens, finest scale first."""
        return torch.cat([self.maps[s].flatten(2).transpose(1, 2) for s in self.scales], dim=1)

    def unflatten(self, tokens: torch.Tensor) -> "BackboneFeatures":
        out = {}
        offset = 0
        for s in self.scales:
            b, c, h, w = self.maps[s].shape
            out[s] = tokens[:, offset:offset + h * w].transpose(1, 2).reshape(b, c, h, w)
            offset += h * w
        return BackboneFeatures(out)


def _conv_block(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, padding_mode="replicate"),
        nn.GroupNorm(math.gcd(8, out_ch), out_ch),
        nn.ReLU(inplace=True),
    )


class ToyBackbone(nn.Module):
    def __init__(self, cfg: ModelConfig, in_channels: int = 3):
        super().__init__()
        c = cfg.channels
        self.scales = cfg.scales
        self.stem = _conv_block(in_channels, c // 2, stride=2)
        widths = [c // 2, c, c, c, c]
        self.stages = nn.ModuleList(
            [_conv_block(widths[i], widths[i + 1], stride=2) for i in range(len(self.scales))]
        )
        self.lateral = nn.ModuleList([nn.Conv2d(c, c, 1) for _ in self.scales])
        self.smooth = nn.ModuleList(
            [nn.Conv2d(c, c, 3, padding=1, padding_mode="replicate") for _ in self.scales]
        )

    def forward(self, images: torch.Tensor) -> BackboneFeatures:
        x = self.stem(images)
        raw = []
        for stage in self.stages:
            x = stage(x)
            raw.append(x)
        # top-down mixer, coarsest first
        mixed = [None] * len(raw)
        top = None
        for i in reversed(range(len(raw))):
            lat = self.lateral[i](raw[i])
            if top is not None:
                lat = lat + F.interpolate(top, size=lat.shape[-2:], mode="nearest")
            top = lat
            mixed[i] = self.smooth[i](lat)
        return BackboneFeatures({s: m for s, m in zip(self.scales, mixed)})


class PixelEmbedding(nn.Module):
    """Sum of all scales upsampled to stride 4, then a 1x1 projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.finest = min(cfg.scales)
        self.proj = nn.Conv2d(cfg.channels, cfg.channels, 1)

    def forward(self, features: BackboneFeatures) -> torch.Tensor:
        base = features.maps[self.finest]
        total = base
        for s in features.scales:
            if s == self.finest:
                continue
            total = total + F.interpolate(features.maps[s], size=base.shape[-2:], mode="nearest")
        return self.proj(total)


class EarlyFusion(nn.Module):
    """Residual bidirectional single-head cross-attention between image tokens and text rows.

    text' = text + Wo_t(attn(text -> image)); image' = image + Wo_i(attn(image -> text')).
    Output projections start at zero, so a fresh module is the identity.
    """

    def __init__(self, channels: int, text_dim: int):
        super().__init__()
        self.text_in = nn.Linear(text_dim, channels)
        self.t_q = nn.Linear(channels, channels, bias=False)
        self.t_k = nn.Linear(channels, channels, bias=False)
        self.t_v = nn.Linear(channels, channels, bias=False)
        self.t_out = nn.Linear(channels, channels)
        self.i_q = nn.Linear(channels, channels, bias=False)
        self.i_k = nn.Linear(channels, channels, bias=False)
        self.i_v = nn.Linear(channels, channels, bias=False)
        self.i_out = nn.Linear(channels, channels)
        self.scale = 1.0 / math.sqrt(channels)
        for layer in (self.t_out, self.i_out):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def attend(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        weights = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        return weights @ v

    def forward(self, features: BackboneFeatures, text: Optional[torch.Tensor]) -> BackboneFeatures:
        if text is None or text.shape[0] == 0:
            return features
        image = features.flatten()
        b = image.shape[0]
        t = self.text_in(text).unsqueeze(0).expand(b, -1, -1)
        t = t + self.t_out(self.attend(self.t_q(t), self.t_k(image), self.t_v(image)))
        image = image + self.i_out(self.attend(self.i_q(image), self.i_k(t), self.i_v(t)))
        return features.unflatten(image)


def early_fuse(fusion: EarlyFusion, features: BackboneFeatures, text: Optional[torch.Tensor]) -> BackboneFeatures:
    """Text-conditioned backbone maps; (K, D) text rows shared across the batch."""
    return fusion(features, text)


def check_image_size(height: int, width: int, cfg: ModelConfig):
    if height % cfg.stride or width % cfg.stride:
        raise ValueError(
            f"image size {height}x{width} is not divisible by {cfg.stride}"
        )
