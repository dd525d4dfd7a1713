"""Continuous-latent video tokenizer.

The encoder maps every group of `temporal_factor` frames to one latent
timestep on its own (no information crosses group boundaries), producing
the mean and log-std of a diagonal Gaussian. The decoder reconstructs a
window of latents jointly with space-time attention, and long sequences are
decoded with a sliding window.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .features import FrozenConvExtractor, frames_to_nchw
from .layers import PatchDown, PatchUp, SpaceTimeBlock, SpatialBlock, sincos_1d, sincos_2d


class ShapeError(ValueError):
    pass


@dataclass
class TokenizerConfig:
    temporal_factor: int = 8
    spatial_factor: int = 32
    # (t, h, w) strides: input striding, two conv blocks, final conv
    encoder_strides: list = field(default_factory=lambda: [[2, 1, 1], [2, 8, 8], [2, 2, 2], [1, 2, 2]])
    # last entry is the temporal depth-to-space head that restores the full 8x
    decoder_strides: list = field(default_factory=lambda: [[1, 2, 2], [2, 2, 2], [2, 8, 8], [2, 1, 1]])
    stem_channels: int = 16
    embed_dim: int = 64
    heads: int = 4
    n_encoder_blocks: int = 2
    decoder_blocks: list = field(default_factory=lambda: [2, 1])
    latent_dim: int = 64
    decode_window: int = 3
    teacher_seed: int = 1234
    perceptual_seed: int = 4321
    log_std_min: float = -30.0
    log_std_max: float = 20.0
    loss_weights: dict = field(default_factory=lambda: {
        "distill": 0.1, "kl": 1e-6, "l1": 0.2, "l2": 2.0, "perceptual": 0.1})

    def validate(self) -> None:
        for name, ladder in (("encoder", self.encoder_strides), ("decoder", self.decoder_strides)):
            if len(ladder) != 4:
                raise ShapeError(f"{name} stride ladder needs 4 stages")
            t = math.prod(s[0] for s in ladder)
            h = math.prod(s[1] for s in ladder)
            w = math.prod(s[2] for s in ladder)
            if t != self.temporal_factor or h != self.spatial_factor or w != self.spatial_factor:
                raise ShapeError(f"{name} strides give ({t}, {h}, {w}), expected "
                                 f"({self.temporal_factor}, {self.spatial_factor}, {self.spatial_factor})")
        if self.latent_dim < 1 or self.decode_window < 1:
            raise ShapeError("latent_dim and decode_window must be >= 1")
        if self.embed_dim % self.heads:
            raise ShapeError("embed_dim must be divisible by heads")


def latent_shape(cfg: TokenizerConfig, video_dims) -> tuple:
    """(T_L, H, W, L) for a (T_v, H_v, W_v, 3) video."""
    T, H, W = video_dims[:3]
    tf, sf = cfg.temporal_factor, cfg.spatial_factor
    if T % tf or H % sf or W % sf:
        raise ShapeError(f"video dims {tuple(video_dims[:3])} not divisible by ({tf}, {sf}, {sf})")
    return (T // tf, H // sf, W // sf, cfg.latent_dim)


def compression_rate(cfg: TokenizerConfig, video_dims) -> float:
    return math.prod(video_dims) / math.prod(latent_shape(cfg, video_dims))


@dataclass
class LatentDistribution:
    mean: torch.Tensor
    log_std: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()


def sample_latents(dist: LatentDistribution, generator: torch.Generator | None = None) -> torch.Tensor:
    eps = torch.randn(dist.mean.shape, generator=generator, dtype=dist.mean.dtype, device=dist.mean.device)
    return dist.mean + dist.log_std.exp() * eps


def rolling_windows(n_latents: int, window: int) -> list[tuple[int, list[int]]]:
    """(window start, latent indices whose frames that window emits).

    Each window emits its centre latent; the first and last windows also emit
    the latents before/after the centre so every latent is emitted once.
    """
    if n_latents <= window:
        return [(0, list(range(n_latents)))]
    c = window // 2
    plan = []
    last = n_latents - window
    for s in range(last + 1):
        lo = 0 if s == 0 else s + c
        hi = n_latents if s == last else s + c + 1
        plan.append((s, list(range(lo, hi))))
    return plan


class VideoTokenizer(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        E, L, C0 = cfg.embed_dim, cfg.latent_dim, cfg.stem_channels
        es, ds = cfg.encoder_strides, cfg.decoder_strides
        self.stem = PatchDown(3, C0, es[0])
        self.down1 = PatchDown(C0, E, es[1])
        self.down2 = PatchDown(E, E, es[2])
        self.enc_blocks = nn.ModuleList(SpatialBlock(E, cfg.heads) for _ in range(cfg.n_encoder_blocks))
        self.down3 = PatchDown(E, E, es[3])
        self.enc_norm = nn.LayerNorm(E)
        self.to_moments = nn.Linear(E, 2 * L)

        self.from_latent = nn.Linear(L, E)
        self.up1 = PatchUp(E, E, ds[0])
        self.dec_blocks1 = nn.ModuleList(SpaceTimeBlock(E, cfg.heads) for _ in range(cfg.decoder_blocks[0]))
        self.up2 = PatchUp(E, E, ds[1])
        self.dec_blocks2 = nn.ModuleList(SpaceTimeBlock(E, cfg.heads) for _ in range(cfg.decoder_blocks[1]))
        self.dec_norm = nn.LayerNorm(E)
        self.up3 = PatchUp(E, C0, ds[2])
        self.up4 = PatchUp(C0, 3, ds[3])

    # ------------------------------------------------------------ encoder
    def _encode_groups(self, x):
        """x: (G, temporal_factor, H, W, 3) -> (G, 1, h, w, 2L)."""
        h = F.gelu(self.stem(x))
        h = self.down2(F.gelu(self.down1(h)))
        b, t, hh, ww, c = h.shape
        h = rearrange(h, "b t h w c -> b t (h w) c")
        h = h + sincos_2d(hh, ww, c).to(h)
        for blk in self.enc_blocks:
            h = blk(h)
        h = rearrange(h, "b t (h w) c -> b t h w c", h=hh)
        return self.to_moments(self.enc_norm(self.down3(h)))

    def encode(self, frames) -> LatentDistribution:
        """(T_v, H_v, W_v, 3) or (B, T_v, H_v, W_v, 3) -> Gaussian over (…, T_L, H, W, L).

        Every latent timestep is computed from its own frame group in a
        separate pass, so the result for a group does not depend on the
        other groups in the clip.
        """
        x = torch.as_tensor(frames)
        unbatched = x.dim() == 4
        if unbatched:
            x = x[None]
        if x.dim() != 5 or x.shape[-1] != 3:
            raise ShapeError(f"expected (B, T, H, W, 3) frames, got {tuple(x.shape)}")
        x = x.to(self.to_moments.weight.dtype)
        latent_shape(self.cfg, x.shape[1:])
        tf = self.cfg.temporal_factor
        groups = rearrange(x, "b (g f) h w c -> g b f h w c", f=tf)
        moments = torch.cat([self._encode_groups(g) for g in groups], dim=1)
        mean, log_std = moments.chunk(2, dim=-1)
        log_std = log_std.clamp(self.cfg.log_std_min, self.cfg.log_std_max)
        if unbatched:
            mean, log_std = mean[0], log_std[0]
        return LatentDistribution(mean, log_std)

    # ------------------------------------------------------------ decoder
    def set_temporal_attention(self, enabled: bool) -> None:
        """Ablation switch: with temporal attention off, latents decode independently."""
        for blk in (*self.dec_blocks1, *self.dec_blocks2):
            blk.temporal = enabled

    @staticmethod
    def _add_positions(h):
        b, t, hh, ww, c = h.shape
        h = rearrange(h, "b t h w c -> b t (h w) c") + sincos_2d(hh, ww, c).to(h)
        return h, sincos_1d(torch.arange(t), c).to(h)

    def _decode(self, z):
        """z: (B, T_L, H, W, L) -> (B, T_L * tf, H * sf, W * sf, 3), any T_L."""
        h = self.up1(self.from_latent(z))
        hh = h.shape[2]
        h, tpos = self._add_positions(h)
        for blk in self.dec_blocks1:
            h = blk(h, tpos)
        h = self.up2(rearrange(h, "b t (h w) c -> b t h w c", h=hh))
        hh = h.shape[2]
        h, tpos = self._add_positions(h)
        for blk in self.dec_blocks2:
            h = blk(h, tpos)
        h = rearrange(self.dec_norm(h), "b t (h w) c -> b t h w c", h=hh)
        return self.up4(F.gelu(self.up3(h)))

    def decode(self, latents):
        z = torch.as_tensor(latents)
        unbatched = z.dim() == 4
        if unbatched:
            z = z[None]
        if z.shape[1] != self.cfg.decode_window:
            raise ShapeError(f"decode expects {self.cfg.decode_window} latents, got {z.shape[1]}")
        out = self._decode(z.to(self.from_latent.weight.dtype))
        return out[0] if unbatched else out

    def rolling_decode(self, latent_seq):
        """Decode an arbitrarily long latent sequence with a sliding window."""
        z = torch.as_tensor(latent_seq)
        unbatched = z.dim() == 4
        if unbatched:
            z = z[None]
        z = z.to(self.from_latent.weight.dtype)
        n, w, tf = z.shape[1], self.cfg.decode_window, self.cfg.temporal_factor
        if n < w:
            out = self._decode(z)
        else:
            chunks = []
            for start, emit in rolling_windows(n, w):
                frames = self._decode(z[:, start:start + w])
                lo, hi = (emit[0] - start) * tf, (emit[-1] - start + 1) * tf
                chunks.append(frames[:, lo:hi])
            out = torch.cat(chunks, dim=1)
        return out[0] if unbatched else out


# ------------------------------------------------------------------ losses

def reconstruction_losses(pred, target, extractor: FrozenConvExtractor | None = None) -> dict:
    d = pred - target
    out = {"l1": d.abs().mean(), "l2": (d * d).mean()}
    if extractor is not None:
        fp = extractor.feature_maps(frames_to_nchw(pred))
        with torch.no_grad():
            ft = extractor.feature_maps(frames_to_nchw(target))
        out["perceptual"] = sum(((a - b) ** 2).mean() for a, b in zip(fp, ft)) / len(fp)
    else:
        out["perceptual"] = torch.zeros((), dtype=d.dtype)
    return out


def latent_distill_loss(latent_mean, teacher_features, eps: float = 1e-12):
    """1 - mean cosine similarity over positions; zero-norm positions are skipped."""
    a, b = latent_mean, teacher_features
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    valid = (na > eps) & (nb > eps)
    if not valid.any():
        return torch.zeros((), dtype=a.dtype)
    cos = (a * b).sum(-1)[valid] / (na[valid] * nb[valid])
    return 1.0 - cos.mean()


def kl_loss(dist: LatentDistribution):
    mu, ls = dist.mean, dist.log_std
    return (0.5 * (mu ** 2 + torch.exp(2 * ls) - 1.0 - 2.0 * ls)).mean()


def _linear_resample_weights(n_in: int, n_out: int):
    """Source indices and weights of 1-D linear interpolation (half-pixel centres)."""
    pos = (torch.arange(n_out, dtype=torch.float64) + 0.5) * n_in / n_out - 0.5
    pos = pos.clamp(0, n_in - 1)
    lo = pos.floor().long()
    hi = (lo + 1).clamp(max=n_in - 1)
    return lo, hi, pos - lo


def teacher_features(teacher: FrozenConvExtractor, frames, grid: tuple):
    """Teacher features resampled to the latent grid (…, T_L, H, W, D).

    Time is linearly interpolated from T_v to T_L (sample points at frame-group
    centres), so only the frames adjacent to those points are run through the
    teacher; space is average-pooled to (H, W).
    """
    x = torch.as_tensor(frames)
    lead = x.shape[:-4]
    x = x.reshape(-1, *x.shape[-4:])
    T_L, H, W = grid
    lo, hi, frac = _linear_resample_weights(x.shape[1], T_L)
    needed = torch.unique(torch.cat([lo, hi]))
    with torch.no_grad():
        f = teacher.dense(frames_to_nchw(x[:, needed]).to(teacher.head.weight.dtype))
        f = F.adaptive_avg_pool2d(f, (H, W))
        f = rearrange(f, "(b t) d h w -> b t h w d", b=x.shape[0])
        where = {int(i): k for k, i in enumerate(needed)}
        a = f[:, [where[int(i)] for i in lo]]
        b = f[:, [where[int(i)] for i in hi]]
        w = frac.to(f)[None, :, None, None, None]
        f = (1 - w) * a + w * b
    return f.reshape(*lead, T_L, H, W, f.shape[-1])


def weighted_total(components: dict, weights: dict):
    return sum(weights.get(k, 0.0) * v for k, v in components.items())


class TokenizerObjective(nn.Module):
    """Holds the frozen teacher and perceptual networks; computes all loss terms."""

    def __init__(self, cfg: TokenizerConfig, perceptual_frame_stride: int = 1):
        super().__init__()
        self.cfg = cfg
        self.perceptual_frame_stride = perceptual_frame_stride
        self.teacher = FrozenConvExtractor(cfg.teacher_seed, out_dim=cfg.latent_dim)
        self.perceptual = FrozenConvExtractor(cfg.perceptual_seed)

    def forward(self, model: VideoTokenizer, frames, generator=None):
        """frames: (B, T_v, H, W, 3). Returns (total, components)."""
        dist = model.encode(frames)
        z = sample_latents(dist, generator)
        recon = model._decode(z)
        comps = reconstruction_losses(recon, frames)
        k = self.perceptual_frame_stride
        comps["perceptual"] = reconstruction_losses(recon[:, ::k], frames[:, ::k], self.perceptual)["perceptual"]
        comps["kl"] = kl_loss(dist)
        comps["distill"] = latent_distill_loss(dist.mean, teacher_features(self.teacher, frames, z.shape[-4:-1]))
        return weighted_total(comps, self.cfg.loss_weights), comps
