"""Flow-ODE sampling: schedules, guidance and the four generation modes.

Latents handled here are normalized and shaped (B, T, N, H, W, L). A
"velocity function" maps (x, tau) to a guided velocity; `GuidedVelocity`
builds one from a world model, conditioning and guidance settings, and the
tests plug in oracle functions directly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .conditioning import ConditioningInputs
from .world_model import WorldModel, interpolate

log = logging.getLogger(__name__)

VelocityFn = Callable[[torch.Tensor, float], torch.Tensor]


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    taus: tuple

    def __post_init__(self):
        t = np.asarray(self.taus, dtype=np.float64)
        if len(t) < 2 or t[0] != 0.0 or t[-1] != 1.0 or np.any(np.diff(t) <= 0):
            raise ValueError("schedule must increase strictly from exactly 0 to exactly 1")

    @property
    def steps(self) -> int:
        return len(self.taus) - 1

    def start_index(self, tau: float) -> int:
        """Smallest grid index whose value is >= tau."""
        return int(np.searchsorted(np.asarray(self.taus), tau, side="left"))


def linear_quadratic_schedule(S: int = 50, S_lin: Optional[int] = None, L: int = 1000) -> NoiseSchedule:
    """S_lin linear steps of size 1/L, then quadratically spaced steps up to 1."""
    S_lin = S // 2 if S_lin is None else S_lin
    if not 0 <= S_lin < S:
        raise ValueError(f"need 0 <= S_lin < S, got S_lin={S_lin}, S={S}")
    if S_lin / L >= 1:
        raise ValueError("linear segment reaches 1 before the quadratic segment")
    lin = [i / L for i in range(S_lin + 1)]
    base = lin[-1]
    n_q = S - S_lin
    quad = [base + (1 - base) * (j / n_q) ** 2 for j in range(1, n_q)]
    return NoiseSchedule(tuple(lin + quad + [1.0]))


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 1.0
    spatial_mask: Optional[torch.Tensor] = None  # (B?, T, N, H, W) bool

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")

    @property
    def active(self) -> bool:
        return self.scale != 1.0


def cfg_combine(v_cond, v_uncond, guidance: GuidanceConfig):
    if guidance.scale == 1.0:
        return v_cond
    guided = v_uncond + guidance.scale * (v_cond - v_uncond)
    if guidance.spatial_mask is None:
        return guided
    m = guidance.spatial_mask.to(torch.bool)
    while m.dim() < v_cond.dim():
        m = m[..., None] if m.dim() == v_cond.dim() - 1 else m[None]
    return torch.where(m, guided, v_cond)


class GuidedVelocity:
    """Model velocity with classifier-free guidance; conditioning is encoded once."""

    def __init__(self, model: WorldModel, cond: ConditioningInputs, guidance: GuidanceConfig = GuidanceConfig(),
                 keep_mask=None, camera_mask=None):
        self.model = model
        self.guidance = guidance
        self.keep_mask = keep_mask
        self.camera_mask = camera_mask
        with torch.no_grad():
            self.bundle = model.encode_conditioning(cond)
            self.null_bundle = model.encode_conditioning(cond.unconditional()) if guidance.active else None

    @torch.no_grad()
    def __call__(self, x, tau: float):
        B = x.shape[0]
        t = torch.full((B,), float(tau), dtype=x.dtype)
        v_c = self.model(x, t, self.bundle, self.keep_mask, self.camera_mask)
        if not self.guidance.active:
            return v_c
        v_u = self.model(x, t, self.null_bundle, self.keep_mask, self.camera_mask)
        return cfg_combine(v_c, v_u, self.guidance)


def euler_denoise(x_init, start_index: int, schedule: NoiseSchedule, velocity: VelocityFn,
                  keep_mask=None, x_keep=None):
    """Integrate dx/dtau = v over the grid from `start_index`; kept cells are re-imposed every step."""
    taus = schedule.taus
    if not 0 <= start_index <= schedule.steps:
        raise ValueError(f"start index {start_index} outside 0..{schedule.steps}")
    x = x_init.clone()
    if keep_mask is not None:
        km = keep_mask[..., None]
        x = torch.where(km, x_keep, x)
    for i in range(start_index, schedule.steps):
        v = velocity(x, taus[i])
        x = x + (taus[i + 1] - taus[i]) * v
        if keep_mask is not None:
            x = torch.where(km, x_keep, x)
        if not torch.isfinite(x).all():
            bad = (~torch.isfinite(x)).sum().item()
            raise NumericalError(f"non-finite latents after step {i} (tau={taus[i]:.5f}): {bad} entries; "
                                 f"|v| max {v.abs().nan_to_num(0).max().item():.3g}")
    return x


def _noise(shape, generator: torch.Generator, dtype=torch.float32):
    return torch.randn(shape, generator=generator, dtype=dtype)


def generate_from_scratch(velocity: VelocityFn, shape: tuple, schedule: NoiseSchedule,
                          generator: torch.Generator):
    """Pure noise -> normalized latents."""
    return euler_denoise(_noise(shape, generator), 0, schedule, velocity)


def inpaint(latents, mask, velocity: VelocityFn, schedule: NoiseSchedule, generator: torch.Generator):
    """Regenerate cells where `mask` (B, T, N, H, W) is True; all other cells are returned bit-identical."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != latents.shape[:-1]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match latent grid {tuple(latents.shape[:-1])}")
    eps = _noise(latents.shape, generator, latents.dtype)
    if not mask.any():
        return latents.clone()
    return euler_denoise(eps, 0, schedule, velocity, keep_mask=~mask, x_keep=latents)


def edit_scene(latents, tau_edit: float, velocity: VelocityFn, schedule: NoiseSchedule,
               generator: torch.Generator):
    """Partially noise real latents to the first grid point >= tau_edit, then denoise."""
    if not 0.0 < tau_edit < 1.0:
        raise ValueError("tau_edit must lie in (0, 1)")
    i = schedule.start_index(tau_edit)
    eps = _noise(latents.shape, generator, latents.dtype)
    x = interpolate(latents, eps, torch.full((latents.shape[0],), schedule.taus[i], dtype=latents.dtype))
    return euler_denoise(x, i, schedule, velocity)


def autoregressive_rollout(context, n_iterations: int, window: int, velocity_for: Callable,
                           schedule: NoiseSchedule, generator: torch.Generator):
    """Extend `context` (B, k, N, H, W, L) by `n_iterations` windows of (window - k) latents.

    `velocity_for(start, keep)` returns the velocity function for the window
    that starts at latent index `start` of the growing sequence; `keep` marks
    the clean context cells of that window.
    """
    k = context.shape[1]
    if not 0 < k < window:
        raise ValueError(f"context length {k} must lie in 1..{window - 1}")
    seq = context.clone()
    for _ in range(n_iterations):
        start = seq.shape[1] - k
        recent = seq[:, start:]
        shape = (seq.shape[0], window, *seq.shape[2:])
        x_keep = torch.zeros(shape, dtype=seq.dtype)
        x_keep[:, :k] = recent
        keep = torch.zeros(shape[:-1], dtype=torch.bool)
        keep[:, :k] = True
        x0 = _noise(shape, generator, seq.dtype)
        out = euler_denoise(x0, 0, schedule, velocity_for(start, keep), keep_mask=keep, x_keep=x_keep)
        seq = torch.cat([seq, out[:, k:]], dim=1)
    return seq


def rollout_with_model(model: WorldModel, context, cond_stream: ConditioningInputs, horizon: int,
                       schedule: NoiseSchedule, guidance: GuidanceConfig, generator: torch.Generator,
                       camera_mask=None):
    """Generate `horizon` new latents after `context`, consuming per-timestep conditioning from the stream.

    The stream covers the whole output sequence (context plus horizon). The
    number of new latents is rounded up to whole windows and then trimmed.
    """
    window = model.cfg.n_latent_frames
    k = context.shape[1]
    if horizon == 0:
        return context.clone()
    n_iter = -(-horizon // (window - k))
    needed = k + n_iter * (window - k)
    if cond_stream.metadata.shape[1] < needed:
        raise ValueError(f"conditioning stream has {cond_stream.metadata.shape[1]} steps, rollout needs {needed}")

    def velocity_for(start, keep):
        cond = cond_stream.time_slice(start, start + window)
        cond = cond.with_present(cond.present)
        cond.timestamps = (cond.timestamps - cond.timestamps[:, :1] + cond_stream.timestamps[:, :1]).clamp(-1, 1)
        return GuidedVelocity(model, cond, guidance, keep_mask=keep, camera_mask=camera_mask)

    seq = autoregressive_rollout(context, n_iter, window, velocity_for, schedule, generator)
    return seq[:, :k + horizon]


def build_agent_cfg_mask(boxes, validity, latent_h: int, latent_w: int) -> torch.Tensor:
    """Latent cells whose footprint overlaps any valid normalized box.

    boxes: (..., Bmax, 4) normalized x1, y1, x2, y2; validity: (..., Bmax).
    Returns (..., latent_h, latent_w) bool.
    """
    boxes = torch.as_tensor(np.asarray(boxes), dtype=torch.float64)
    validity = torch.as_tensor(np.asarray(validity), dtype=torch.bool)
    ys = torch.arange(latent_h, dtype=torch.float64)
    xs = torch.arange(latent_w, dtype=torch.float64)
    x1, y1, x2, y2 = (boxes[..., i, None, None] for i in range(4))
    cx0, cx1 = (xs / latent_w)[None, :], ((xs + 1) / latent_w)[None, :]
    cy0, cy1 = (ys / latent_h)[:, None], ((ys + 1) / latent_h)[:, None]
    hit = (torch.minimum(x2, cx1) > torch.maximum(x1, cx0)) & (torch.minimum(y2, cy1) > torch.maximum(y1, cy0))
    hit = hit & validity[..., None, None]
    return hit.any(dim=-3)
