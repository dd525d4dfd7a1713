"""Pixel-level oracles that read conditioning back out of rendered or generated video.

The renderer multiplies every pixel by a per-channel weather tint and a
time-of-day brightness; the top band of each frame is always open sky, so
its colour divided by the base sky colour identifies the pair. Ego turning
pans the skyline horizontally; the sign of that pan is the sign of the
curvature (left turns move content right in every camera).
"""
from __future__ import annotations

import itertools

import numpy as np

from . import synth


def sky_colour(frames) -> np.ndarray:
    """Median RGB of the always-sky band over all given frames; frames (..., H, W, 3)."""
    f = np.asarray(frames, dtype=np.float64)
    band = max(1, int(f.shape[-3] * synth.SKY_BAND_FRACTION))
    return np.median(f[..., :band, :, :].reshape(-1, 3), axis=0)


def _signatures():
    keys = list(itertools.product(synth.WEATHERS, synth.TIMES_OF_DAY))
    sig = np.array([np.array(synth.WEATHER_LOG_TINT[w]) + np.log(synth.TIME_OF_DAY_BRIGHTNESS[t]) for w, t in keys])
    return keys, sig


def classify_appearance(frames) -> tuple[str, str]:
    """(weather, time_of_day) whose log colour signature is nearest to the observed sky."""
    c = np.clip(sky_colour(frames), 1e-4, None)
    obs = np.log(c / synth.SKY_RGB)
    keys, sig = _signatures()
    return keys[int(np.argmin(((sig - obs) ** 2).sum(1)))]


def _band_profile(frame: np.ndarray) -> np.ndarray:
    """Column profile of the band between the sky strip and the horizon."""
    H = frame.shape[0]
    lo, hi = int(H * synth.SKY_BAND_FRACTION), H // 2
    p = frame[lo:hi].mean(axis=(0, 2))
    return p - p.mean()


def horizontal_shift(a: np.ndarray, b: np.ndarray, max_shift: int) -> int:
    """Integer s minimising mean |b(x) - a(x - s)| over the overlap of two 1-D profiles."""
    n = len(a)
    best, best_s = np.inf, 0
    for s in range(-max_shift, max_shift + 1):
        if s >= 0:
            d = np.abs(b[s:] - a[:n - s])
        else:
            d = np.abs(b[:n + s] - a[-s:])
        cost = d.mean()
        if cost < best - 1e-12:
            best, best_s = cost, s
    return best_s


def lateral_flow(video, stride: int = 8, max_shift: int = 24) -> float:
    """Total horizontal pan (pixels) of the skyline band; video (T, N, H, W, 3) or (T, H, W, 3)."""
    v = np.asarray(video, dtype=np.float64)
    if v.ndim == 4:
        v = v[:, None]
    total = 0
    for n in range(v.shape[1]):
        for t in range(0, v.shape[0] - stride, stride):
            total += horizontal_shift(_band_profile(v[t, n]), _band_profile(v[t + stride, n]), max_shift)
    return float(total)


def lateral_flow_sign(video, stride: int = 8, max_shift: int = 24) -> int:
    return int(np.sign(lateral_flow(video, stride, max_shift)))
