"""Frozen, seeded convolutional feature extractor.

Stands in for the pretrained image encoders (distillation teacher, perceptual
network, evaluation features). Weights are a deterministic function of the
seed, so the "pretrained" network ships as a constant.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class FrozenConvExtractor(nn.Module):
    def __init__(self, seed: int = 0, widths=(16, 32, 64), out_dim: int = 64, in_channels: int = 3):
        super().__init__()
        self.seed = seed
        self.out_dim = out_dim
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        c_in = in_channels
        for w in widths:
            conv = nn.Conv2d(c_in, w, 3, stride=2, padding=1, padding_mode="replicate")
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (9 * c_in)) ** 0.5, generator=gen)
                conv.bias.uniform_(-0.1, 0.1, generator=gen)
            self.convs.append(conv)
            c_in = w
        self.head = nn.Conv2d(c_in, out_dim, 1)
        with torch.no_grad():
            self.head.weight.normal_(0.0, c_in ** -0.5, generator=gen)
            self.head.bias.zero_()
        self.requires_grad_(False)

    def feature_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        """x: (B, 3, H, W) in [0, 1]. Returns the activation after every conv."""
        maps = []
        h = 2 * x - 1
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            maps.append(h)
        return maps

    def dense(self, x: torch.Tensor) -> torch.Tensor:
        """(B, out_dim, H/8, W/8) projected features."""
        return self.head(self.feature_maps(x)[-1])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Globally pooled features (B, out_dim)."""
        return self.dense(x).mean(dim=(-2, -1))


def frames_to_nchw(frames) -> torch.Tensor:
    """(..., H, W, 3) array/tensor -> (prod(...), 3, H, W) float tensor."""
    t = frames if torch.is_tensor(frames) else torch.as_tensor(np.asarray(frames))
    if not t.is_floating_point():
        t = t.float()
    return t.reshape(-1, *t.shape[-3:]).permute(0, 3, 1, 2)
