"""Transformer building blocks shared by the tokenizer and the world model."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange


def sincos_1d(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal encoding of (possibly fractional) positions -> (*positions.shape, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = positions.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def sincos_2d(h: int, w: int, dim: int) -> torch.Tensor:
    """(h*w, dim) encoding; first half of channels encodes rows, second half columns."""
    rows = sincos_1d(torch.arange(h).repeat_interleave(w), dim // 2)
    cols = sincos_1d(torch.arange(w).repeat(h), dim - dim // 2)
    return torch.cat([rows, cols], dim=-1)


class PatchDown(nn.Module):
    """Strided convolution with kernel == stride, written as space-to-depth + linear."""

    def __init__(self, in_dim: int, out_dim: int, stride: tuple):
        super().__init__()
        self.stride = tuple(stride)
        self.proj = nn.Linear(in_dim * math.prod(stride), out_dim)

    def forward(self, x):  # (B, T, H, W, C)
        pt, ph, pw = self.stride
        x = rearrange(x, "b (t pt) (h ph) (w pw) c -> b t h w (pt ph pw c)", pt=pt, ph=ph, pw=pw)
        return self.proj(x)


class PatchUp(nn.Module):
    """Linear projection followed by depth-to-space (pixel shuffle in time and space)."""

    def __init__(self, in_dim: int, out_dim: int, stride: tuple):
        super().__init__()
        self.stride = tuple(stride)
        self.out_dim = out_dim
        self.proj = nn.Linear(in_dim, out_dim * math.prod(stride))

    def forward(self, x):
        pt, ph, pw = self.stride
        x = self.proj(x)
        return rearrange(x, "b t h w (pt ph pw c) -> b (t pt) (h ph) (w pw) c", pt=pt, ph=ph, pw=pw)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, context_dim: int | None = None, qk_norm: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        context_dim = context_dim or dim
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(context_dim, 2 * dim)
        self.out = nn.Linear(dim, dim)
        self.q_norm = nn.LayerNorm(self.head_dim) if qk_norm else nn.Identity()
        self.k_norm = nn.LayerNorm(self.head_dim) if qk_norm else nn.Identity()

    def forward(self, x, context=None):
        context = x if context is None else context
        q = rearrange(self.q(x), "b s (h d) -> b h s d", h=self.heads)
        k, v = rearrange(self.kv(context), "b s (two h d) -> two b h s d", two=2, h=self.heads)
        q, k = self.q_norm(q), self.k_norm(k)
        o = F.scaled_dot_product_attention(q, k, v)
        return self.out(rearrange(o, "b h s d -> b s (h d)"))


class MLP(nn.Sequential):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__(nn.Linear(dim, ratio * dim), nn.GELU(), nn.Linear(ratio * dim, dim))


class SpatialBlock(nn.Module):
    """Pre-norm block attending over the spatial tokens of each timestep only."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim)

    def forward(self, x):  # (B, T, S, C)
        b = x.shape[0]
        x = rearrange(x, "b t s c -> (b t) s c")
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return rearrange(x, "(b t) s c -> b t s c", b=b)


class SpaceTimeBlock(nn.Module):
    """Spatial attention, then temporal attention, then MLP.

    Time positions only enter through the temporal attention input, so with
    `temporal` switched off the block acts on each timestep independently.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_s = nn.LayerNorm(dim)
        self.attn_s = Attention(dim, heads)
        self.norm_t = nn.LayerNorm(dim)
        self.attn_t = Attention(dim, heads)
        self.norm_m = nn.LayerNorm(dim)
        self.mlp = MLP(dim)
        self.temporal = True

    def forward(self, x, time_pos=None):  # (B, T, S, C); time_pos (T, C)
        b, t, s, _ = x.shape
        x = rearrange(x, "b t s c -> (b t) s c")
        x = x + self.attn_s(self.norm_s(x))
        if self.temporal:
            x = rearrange(x, "(b t) s c -> (b s) t c", b=b)
            h = self.norm_t(x)
            if time_pos is not None:
                h = h + time_pos
            x = x + self.attn_t(h)
            x = rearrange(x, "(b s) t c -> (b t) s c", b=b)
        x = x + self.mlp(self.norm_m(x))
        return rearrange(x, "(b t) s c -> b t s c", b=b)
