"""Evaluation metrics: Frechet feature distance, box-vs-mask IoU, validation loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .features import FrozenConvExtractor, frames_to_nchw
from .world_model import WorldModel, context_keep_mask, flow_matching_loss, make_flow_batch, normalize_latents, \
    sample_tau

log = logging.getLogger(__name__)

EIG_TOLERANCE = 1e-8


@dataclass
class FeatureSet:
    values: np.ndarray  # (n, d)
    extractor: str = "frozen-conv"
    seed: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("features must be an (n, d) array")
        if not np.isfinite(self.values).all():
            raise ValueError("features contain non-finite values")


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    scale = max(abs(w).max(initial=0.0), 1.0)
    if w.min(initial=0.0) < -EIG_TOLERANCE * scale:
        log.warning("covariance has eigenvalue %.3g below tolerance; clamped", w.min())
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: FeatureSet, b: FeatureSet) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)) between Gaussian fits."""
    xa, xb = a.values, b.values
    if len(xa) < 2 or len(xb) < 2:
        raise ValueError("Frechet distance needs at least two samples per set")
    if xa.shape[1] != xb.shape[1]:
        raise ValueError("feature dimensions differ")
    mu_a, mu_b = xa.mean(0), xb.mean(0)
    sa, sb = np.atleast_2d(np.cov(xa, rowvar=False)), np.atleast_2d(np.cov(xb, rowvar=False))
    # Tr (S_a S_b)^(1/2) = Tr (S_a^(1/2) S_b S_a^(1/2))^(1/2), a symmetric PSD matrix
    ra = _sqrt_psd(sa)
    inner = ra @ sb @ ra
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(sa) + np.trace(sb) - 2 * tr_sqrt)
    return max(d, 0.0)


@torch.no_grad()
def extract_features(frames, extractor: FrozenConvExtractor, batch: int = 256) -> FeatureSet:
    """Per-frame pooled features for any (..., H, W, 3) frame array in [0, 1]."""
    x = frames_to_nchw(frames).float()
    out = [extractor(x[i:i + batch]) for i in range(0, len(x), batch)]
    return FeatureSet(torch.cat(out).double().numpy(), "frozen-conv", extractor.seed)


# ------------------------------------------------------------------- IoU

def rasterize_box(box, height: int, width: int) -> np.ndarray:
    """Pixels whose centres fall inside a normalized (x1, y1, x2, y2) box."""
    x1, y1, x2, y2 = box
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    return ((ys >= y1) & (ys <= y2))[:, None] & ((xs >= x1) & (xs <= x2))[None, :]


@dataclass
class IouReport:
    iou: dict = field(default_factory=dict)  # category -> IoU
    support: dict = field(default_factory=dict)  # category -> number of boxes


def iou_from_masks(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def conditioning_iou(boxes, box_valid, box_category, masks, categories=None) -> IouReport:
    """Class-wise IoU between rasterized conditioning boxes and segmentation masks.

    boxes (F, A, 4) normalized, box_valid (F, A), box_category (F, A) int,
    masks (F, H, W) with value category + 1 (0 is background). Pixels are
    pooled over all frames before the ratio is taken.
    """
    boxes, box_valid = np.asarray(boxes), np.asarray(box_valid, bool)
    box_category, masks = np.asarray(box_category), np.asarray(masks)
    F_, H, W = masks.shape
    cats = sorted(set(box_category[box_valid].tolist()) | set((np.unique(masks[masks > 0]) - 1).tolist())) \
        if categories is None else list(categories)
    report = IouReport()
    for c in cats:
        inter = union = n = 0
        for f in range(F_):
            r = np.zeros((H, W), bool)
            for a in np.flatnonzero(box_valid[f] & (box_category[f] == c)):
                r |= rasterize_box(boxes[f, a], H, W)
                n += 1
            m = masks[f] == c + 1
            inter += np.logical_and(r, m).sum()
            union += np.logical_or(r, m).sum()
        report.iou[int(c)] = float(inter / union) if union else 1.0
        report.support[int(c)] = n
    return report


# -------------------------------------------------------- validation loss

@torch.no_grad()
def validation_loss(model: WorldModel, latents_mean, cond, latent_mean: float, latent_std: float, n: int,
                    seed: int = 0, batch: int = 32) -> float:
    """Mean flow-matching loss on the from-scratch task over the first n samples.

    Flow times and noise come from `seed`, so two checkpoints see exactly the
    same corrupted inputs.
    """
    if n <= 0:
        raise ValueError("validation needs n >= 1 samples")
    if n > latents_mean.shape[0]:
        raise ValueError(f"requested {n} samples, validation set has {latents_mean.shape[0]}")
    model.eval()
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    taus = sample_tau(rng, n)
    total = 0.0
    for lo in range(0, n, batch):
        hi = min(lo + batch, n)
        x = normalize_latents(latents_mean[lo:hi], latent_mean, latent_std)
        fb = make_flow_batch(x, torch.as_tensor(taus[lo:hi], dtype=x.dtype), generator=gen)
        bundle = model.encode_conditioning(cond.index(slice(lo, hi)))
        v_hat = model(fb.xt, fb.tau, bundle)
        mask = ~context_keep_mask(hi - lo, *x.shape[1:5], 0)
        total += float(flow_matching_loss(v_hat, fb.v, mask)) * (hi - lo)
    return total / n
