"""Latent flow-matching world model.

Tokens live on a (T, N, H, W) grid of L-dimensional latents. Each block runs
spatial attention (all cameras of one timestep), temporal attention (one
location over time), cross-attention into the conditioning tokens of the
same timestep, and an MLP. Every sub-layer is modulated by an adaptive
LayerNorm driven by the flow time and the per-timestep action embedding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange
from scipy.special import expit
from scipy.stats import norm

from .conditioning import ConditioningBundle, ConditioningConfig, ConditioningEncoder
from .layers import MLP, Attention, sincos_1d, sincos_2d


@dataclass
class WorldModelConfig:
    n_blocks: int = 4
    hidden: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    latent_dim: int = 64
    n_latent_frames: int = 6
    n_cameras: int = 2
    latent_h: int = 2
    latent_w: int = 4
    qk_norm: bool = True
    latent_mean: float = 0.0
    latent_std: Optional[float] = 0.32  # None: estimate from encoded training data
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)

    def n_tokens(self) -> int:
        return self.n_latent_frames * self.n_cameras * self.latent_h * self.latent_w


def normalize_latents(x, mean: float, std: float):
    return (x - mean) / std


def denormalize_latents(x, mean: float, std: float):
    return x * std + mean


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class WorldModelBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, qk_norm: bool = True):
        super().__init__()
        self.norms = nn.ModuleList(nn.LayerNorm(dim, elementwise_affine=False) for _ in range(4))
        self.attn_s = Attention(dim, heads, qk_norm=qk_norm)
        self.attn_t = Attention(dim, heads, qk_norm=qk_norm)
        self.attn_x = Attention(dim, heads, qk_norm=qk_norm)
        self.mlp = MLP(dim, mlp_ratio)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 12 * dim))
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)

    def forward(self, h, pos, cond, context):
        """h, pos: (B, T, S, C); cond: (B, T, C); context: (B, T, K, C)."""
        b, t, s, _ = h.shape
        h = h + pos
        mods = self.modulation(cond)[:, :, None].chunk(12, dim=-1)
        sh_s, sc_s, g_s, sh_t, sc_t, g_t, sh_x, sc_x, g_x, sh_m, sc_m, g_m = mods

        y = rearrange(_modulate(self.norms[0](h), sh_s, sc_s), "b t s c -> (b t) s c")
        h = h + g_s * rearrange(self.attn_s(y), "(b t) s c -> b t s c", b=b)

        y = rearrange(_modulate(self.norms[1](h), sh_t, sc_t), "b t s c -> (b s) t c")
        h = h + g_t * rearrange(self.attn_t(y), "(b s) t c -> b t s c", b=b)

        y = rearrange(_modulate(self.norms[2](h), sh_x, sc_x), "b t s c -> (b t) s c")
        ctx = rearrange(context, "b t k c -> (b t) k c")
        h = h + g_x * rearrange(self.attn_x(y, ctx), "(b t) s c -> b t s c", b=b)

        h = h + g_m * self.mlp(_modulate(self.norms[3](h), sh_m, sc_m))
        return h


class WorldModel(nn.Module):
    def __init__(self, cfg: WorldModelConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.hidden
        self.conditioning = ConditioningEncoder(cfg.conditioning, C)
        self.in_proj = nn.Linear(cfg.latent_dim, C)
        self.clean_embed = nn.Parameter(torch.zeros(C))
        self.camera_placeholder = nn.Parameter(torch.randn(C) * 0.02)
        self.tau_mlp = nn.Sequential(nn.Linear(C, C), nn.SiLU(), nn.Linear(C, C))
        self.blocks = nn.ModuleList(WorldModelBlock(C, cfg.heads, cfg.mlp_ratio, cfg.qk_norm)
                                    for _ in range(cfg.n_blocks))
        self.final_norm = nn.LayerNorm(C, elementwise_affine=False)
        self.final_modulation = nn.Sequential(nn.SiLU(), nn.Linear(C, 2 * C))
        self.out_proj = nn.Linear(C, cfg.latent_dim)
        nn.init.zeros_(self.final_modulation[1].weight)
        nn.init.zeros_(self.final_modulation[1].bias)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)
        self.register_buffer("spatial_pos", sincos_2d(cfg.latent_h, cfg.latent_w, C).float(), persistent=False)

    def modulation_layers(self) -> list[nn.Linear]:
        return [blk.modulation[1] for blk in self.blocks] + [self.final_modulation[1]]

    def encode_conditioning(self, cond_inputs) -> ConditioningBundle:
        return self.conditioning(cond_inputs)

    def forward(self, x, tau, bundle: ConditioningBundle, keep_mask=None, camera_mask=None):
        """Predict the flow velocity for every latent token.

        x: (B, T, N, H, W, L) normalized latents, clean where `keep_mask` is set.
        tau: (B,) flow time of the noisy tokens.
        keep_mask: (B, T, N, H, W) bool, clean context tokens.
        camera_mask: (B, N) bool, cameras present in the sample.
        """
        cfg = self.cfg
        if x.dim() != 6 or x.shape[-1] != cfg.latent_dim:
            raise ValueError(f"expected latents (B, T, N, H, W, {cfg.latent_dim}), got {tuple(x.shape)}")
        B, T, N, H, W, _ = x.shape
        if (H, W) != (cfg.latent_h, cfg.latent_w):
            raise ValueError(f"latent grid {(H, W)} does not match model grid {(cfg.latent_h, cfg.latent_w)}")
        if bundle.tokens.shape[:2] != (B, T) or bundle.camera.shape[:2] != (B, N):
            raise ValueError("conditioning bundle does not match latent batch/time/camera dimensions")
        if not torch.isfinite(x).all():
            raise ValueError("non-finite values in latent input")
        tau = torch.as_tensor(tau, dtype=x.dtype).reshape(-1).expand(B)

        h = self.in_proj(x)
        if keep_mask is not None:
            h = h + keep_mask[..., None].to(h.dtype) * self.clean_embed
        if camera_mask is not None:
            drop = ~camera_mask.to(torch.bool)[:, None, :, None, None, None]
            h = torch.where(drop, self.camera_placeholder.to(h.dtype), h)
        h = rearrange(h, "b t n h w c -> b t (n h w) c")

        # the learned timestamp encoding varies little across a clip, so the latent index gets a fixed one too
        pos = (self.spatial_pos.to(h.dtype).repeat(N, 1)[None, None]
               + sincos_1d(torch.arange(T), cfg.hidden).to(h)[None, :, None]
               + bundle.timestamp[:, :, None]
               + bundle.camera.repeat_interleave(H * W, dim=1)[:, None])
        t_emb = self.tau_mlp(sincos_1d(tau * 1000.0, cfg.hidden).to(h.dtype))
        cond = t_emb[:, None] + bundle.action
        for blk in self.blocks:
            h = blk(h, pos, cond, bundle.tokens)
        shift, scale = self.final_modulation(cond)[:, :, None].chunk(2, dim=-1)
        out = self.out_proj(_modulate(self.final_norm(h), shift, scale))
        return rearrange(out, "b t (n h w) l -> b t n h w l", n=N, h=H)


# ------------------------------------------------------------ flow matching

@dataclass(frozen=True)
class TauMixture:
    """Mixture of logit-normal components: tau = sigmoid(z), z ~ N(mu, sigma)."""
    modes: tuple = ((0.5, 1.4, 0.8), (-3.0, 1.0, 0.2))  # (mu, sigma, weight)

    def __post_init__(self):
        w = [m[2] for m in self.modes]
        if any(v < 0 for v in w) or abs(sum(w) - 1) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to one")
        if any(m[1] <= 0 for m in self.modes):
            raise ValueError("mixture scales must be positive")

    def cdf(self, tau):
        tau = np.clip(np.asarray(tau, dtype=np.float64), 1e-300, 1 - 1e-16)
        z = np.log(tau) - np.log1p(-tau)
        return sum(p * norm.cdf((z - mu) / s) for mu, s, p in self.modes)


def sample_tau(rng: np.random.Generator, size: int, mixture: TauMixture = TauMixture()) -> np.ndarray:
    w = np.array([m[2] for m in mixture.modes])
    comp = rng.choice(len(w), size=size, p=w)
    mu = np.array([m[0] for m in mixture.modes])[comp]
    sd = np.array([m[1] for m in mixture.modes])[comp]
    z = rng.normal(mu, sd)
    tau = expit(z)
    return np.clip(tau, np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0))


def sample_context_length(rng: np.random.Generator, T: int) -> int:
    """Uniform number of clean context frames in {0, ..., T-1}; 0 means generation from scratch."""
    if T < 1:
        raise ValueError("need at least one latent frame")
    return int(rng.integers(0, T))


@dataclass
class FlowBatch:
    x: torch.Tensor  # clean target
    eps: torch.Tensor
    tau: torch.Tensor  # (B,)
    xt: torch.Tensor  # noisy input with kept tokens clean
    v: torch.Tensor  # target velocity x - eps
    keep: torch.Tensor  # (B, T, N, H, W) bool


def interpolate(x, eps, tau):
    t = tau.reshape(-1, *([1] * (x.dim() - 1))).to(x.dtype)
    return t * x + (1 - t) * eps


def make_flow_batch(x, tau, keep=None, generator: Optional[torch.Generator] = None, eps=None) -> FlowBatch:
    """x: (B, T, N, H, W, L). Kept tokens stay clean; the rest sit on the noise path at tau."""
    if eps is None:
        eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    tau = torch.as_tensor(tau, dtype=x.dtype).reshape(-1)
    if keep is None:
        keep = torch.zeros(x.shape[:-1], dtype=torch.bool)
    xt = torch.where(keep[..., None], x, interpolate(x, eps, tau))
    return FlowBatch(x, eps, tau, xt, x - eps, keep)


def context_keep_mask(B: int, T: int, N: int, H: int, W: int, t_ctx) -> torch.Tensor:
    """Keep the first t_ctx[b] latent frames clean."""
    t_ctx = torch.as_tensor(t_ctx).reshape(-1).expand(B)
    frames = torch.arange(T)[None] < t_ctx[:, None]
    return frames[:, :, None, None, None].expand(B, T, N, H, W).clone()


def flow_matching_loss(v_hat, v, loss_mask):
    """Mean squared velocity error over tokens where `loss_mask` (B, T, N, H, W) is set."""
    m = loss_mask[..., None].to(v.dtype)
    denom = m.sum() * v.shape[-1]
    if denom == 0:
        return (v_hat * 0).sum()
    return ((v_hat - v) ** 2 * m).sum() / denom


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

