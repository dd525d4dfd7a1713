"""Conditioning encoders and dropout procedures.

Raw conditioning lives in `ConditioningInputs` (plain tensors, batch first).
`ConditioningEncoder` turns it into a `ConditioningBundle`: cross-attention
tokens per timestep, an action embedding per timestep for the adaptive
norm path, and additive camera / timestamp encodings. Every droppable
variable has a presence flag; absent variables are replaced by a learned
null token, which is what makes the unconditional branch for guidance
well defined.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import synth

log = logging.getLogger(__name__)

AGENT_FEATURE_DIM = 13


@dataclass(frozen=True)
class SymlogParams:
    s: float
    y_max: float

    def __post_init__(self):
        if self.s <= 0 or self.y_max <= 0:
            raise ValueError("symlog needs s > 0 and y_max > 0")


SPEED_SYMLOG = SymlogParams(3.6, 75.0)
CURVATURE_SYMLOG = SymlogParams(1000.0, 0.1)
POSITION_SYMLOG = SymlogParams(1.0, 100.0)


def symlog(y, params: SymlogParams):
    """sign(y) log(1 + s|y|) / log(1 + s y_max); inputs beyond y_max saturate at +-1."""
    xp = torch if torch.is_tensor(y) else np
    y = y if torch.is_tensor(y) else np.asarray(y, dtype=np.float64)
    a = xp.abs(y)
    if (a > params.y_max).any():
        log.debug("symlog input beyond y_max=%s clamped", params.y_max)
        a = xp.clip(a, 0, params.y_max)
    return xp.sign(y) * xp.log1p(params.s * a) / math.log1p(params.s * params.y_max)


def symlog_inverse(v, params: SymlogParams):
    xp = torch if torch.is_tensor(v) else np
    v = v if torch.is_tensor(v) else np.asarray(v, dtype=np.float64)
    return xp.sign(v) * xp.expm1(xp.abs(v) * math.log1p(params.s * params.y_max)) / params.s


@dataclass
class ConditioningConfig:
    b_max: int = 8
    fourier_pairs: int = 8
    timestamp_half_span: float = 2.0  # seconds mapped to +-1
    taxonomy: dict = field(default_factory=lambda: {
        "country": len(synth.COUNTRIES),
        "weather": len(synth.WEATHERS),
        "time_of_day": len(synth.TIMES_OF_DAY),
        "lanes": synth.MAX_LANES,
        "one_way": 2,
        "crossing": 2,
        "speed_limit": len(synth.SPEED_LIMITS_KMH),
        "traffic_light": len(synth.TRAFFIC_LIGHTS),
    })
    clip_dim: int = 32
    scenario_dim: int = 32
    distortion_dim: int = 4
    agent_feature_dropout: float = 0.3
    speed_symlog: list = field(default_factory=lambda: [SPEED_SYMLOG.s, SPEED_SYMLOG.y_max])
    curvature_symlog: list = field(default_factory=lambda: [CURVATURE_SYMLOG.s, CURVATURE_SYMLOG.y_max])

    @property
    def metadata_fields(self) -> list[str]:
        return list(self.taxonomy)

    def variables(self) -> list[str]:
        """Names of the independently droppable conditioning variables."""
        return [*self.metadata_fields, "clip", "scenario", "agents", "speed", "curvature"]

    def n_tokens(self, n_cameras: int) -> int:
        return len(self.metadata_fields) + 2 + n_cameras * self.b_max


# ------------------------------------------------------------ timestamps

def relative_times(t_abs, present_index: int, half_span: float) -> np.ndarray:
    """Seconds relative to the present frame, divided by `half_span` and clipped to [-1, 1]."""
    t = np.asarray(t_abs, dtype=np.float64)
    rel = t - t[present_index]
    if half_span <= 0:
        return np.zeros_like(rel)
    return np.clip(rel / half_span, -1.0, 1.0)


def fourier_features(rel, n_pairs: int):
    """Interleaved (sin, cos) pairs at frequencies pi * 2^k."""
    rel = torch.as_tensor(rel)
    freqs = math.pi * 2.0 ** torch.arange(n_pairs, dtype=rel.dtype)
    ang = rel[..., None] * freqs
    return torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)


class TimestampEncoder(nn.Module):
    def __init__(self, n_pairs: int, dim: int):
        super().__init__()
        self.n_pairs = n_pairs
        self.mlp = nn.Sequential(nn.Linear(2 * n_pairs, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, rel):
        return self.mlp(fourier_features(rel, self.n_pairs).to(self.mlp[0].weight.dtype))


def encode_timestamps(encoder: TimestampEncoder, t_abs, present_index: int, half_span: float):
    """Absolute seconds -> (T, C) encodings relative to the present frame."""
    rel = torch.as_tensor(relative_times(t_abs, present_index, half_span))
    return encoder(rel)


# ---------------------------------------------------------------- camera

def camera_arrays(cams: Sequence[synth.CameraSpec], distortion_dim: int = 4):
    """(intrinsics (N, 4) normalized by image size, extrinsics (N, 16), distortion (N, D))."""
    intr = np.array([[c.intrinsics[0] / c.width, c.intrinsics[1] / c.height,
                      c.intrinsics[2] / c.width, c.intrinsics[3] / c.height] for c in cams])
    ext = np.array([np.asarray(c.extrinsics, dtype=np.float64).ravel() for c in cams])
    dist = np.zeros((len(cams), distortion_dim))
    for i, c in enumerate(cams):
        k = np.asarray(c.distortion, dtype=np.float64)[:distortion_dim]
        dist[i, :len(k)] = k
    return intr, ext, dist


class CameraEncoder(nn.Module):
    """Sum of separate linear embeddings of intrinsics, extrinsics and distortion."""

    def __init__(self, dim: int, distortion_dim: int = 4):
        super().__init__()
        self.intrinsics = nn.Linear(4, dim)
        self.extrinsics = nn.Linear(16, dim)
        self.distortion = nn.Linear(distortion_dim, dim)

    def forward(self, intrinsics, extrinsics, distortion):
        return self.intrinsics(intrinsics) + self.extrinsics(extrinsics) + self.distortion(distortion)


def encode_camera(encoder: CameraEncoder, cam: synth.CameraSpec):
    intr, ext, dist = camera_arrays([cam], encoder.distortion.in_features)
    w = encoder.intrinsics.weight
    f = lambda a: torch.as_tensor(a[0], dtype=w.dtype)
    return encoder(f(intr), f(ext), f(dist))


# ---------------------------------------------------------------- agents

@dataclass
class AgentFeatures:
    values: np.ndarray  # (T, N, B, 13)
    validity: np.ndarray  # (T, N, B) bool


def _camera_yaw(cam: synth.CameraSpec) -> float:
    fwd = cam.rotation[2]  # camera z axis in vehicle coordinates
    return math.atan2(fwd[1], fwd[0])


def build_agent_features(tracks: Sequence[synth.AgentTrack], cams: Sequence[synth.CameraSpec],
                         frame_indices: Sequence[int], b_max: int = 8) -> AgentFeatures:
    """13 features per (latent timestep, camera, box slot).

    Layout: normalized 2D box (4), symlog camera-frame centre (3),
    log dimensions (3), camera-relative yaw as sin/cos (2), scaled category (1).
    Slots are filled nearest-first; empty slots are zero with validity False.
    """
    T, N = len(frame_indices), len(cams)
    values = np.zeros((T, N, b_max, AGENT_FEATURE_DIM))
    valid = np.zeros((T, N, b_max), bool)
    n_cat = len(synth.CATEGORIES)
    for ti, f in enumerate(frame_indices):
        for n, cam in enumerate(cams):
            rows = []
            for ag in tracks:
                box = synth.project_box(ag.centers[f], ag.yaw[f], ag.dims, cam)
                if box is None:
                    continue
                c_cam = cam.rotation @ np.asarray(ag.centers[f], dtype=np.float64) + cam.translation
                rel_yaw = float(ag.yaw[f]) - _camera_yaw(cam)
                feat = np.concatenate([
                    box,
                    symlog(c_cam, POSITION_SYMLOG),
                    np.log1p(np.asarray(ag.dims, dtype=np.float64)) / math.log1p(20.0),
                    [math.sin(rel_yaw), math.cos(rel_yaw)],
                    [(ag.category + 1) / n_cat],
                ])
                rows.append((c_cam[2], feat))
            if len(rows) > b_max:
                log.warning("%d visible agents exceed B_max=%d; keeping the nearest", len(rows), b_max)
            rows.sort(key=lambda r: r[0])
            for b, (_, feat) in enumerate(rows[:b_max]):
                values[ti, n, b] = feat
                valid[ti, n, b] = True
    return AgentFeatures(values, valid)


def agent_feature_dropout(features: AgentFeatures, rng: np.random.Generator, p: float = 0.3) -> AgentFeatures:
    """Zero each feature dimension of each slot independently with probability p."""
    if p <= 0:
        return AgentFeatures(features.values.copy(), features.validity.copy())
    keep = rng.random(features.values.shape) >= p
    return AgentFeatures(features.values * keep, features.validity.copy())


def agent_instance_dropout(features: AgentFeatures, rng: np.random.Generator) -> AgentFeatures:
    """Per camera: count instances at a random frame, keep a uniform number of the first slots everywhere."""
    values, valid = features.values.copy(), features.validity.copy()
    T, N, B = valid.shape
    for n in range(N):
        t = int(rng.integers(T))
        n_inst = int(valid[t, n].sum())
        keep = int(rng.integers(min(B, n_inst) + 1))
        values[:, n, keep:] = 0.0
        valid[:, n, keep:] = False
    return AgentFeatures(values, valid)


# ------------------------------------------------------ external sources

class StubEmbeddingProvider:
    """Unit-norm pseudo-random vectors keyed by text, standing in for external encoders."""

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def __call__(self, key: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{key}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)


def clip_prompt(spec: synth.SceneSpec) -> str:
    return f"a {spec.weather} {spec.time_of_day} drive in {spec.country}"


def scenario_key(spec: synth.SceneSpec) -> str:
    k = float(np.mean(spec.curvature))
    turn = "left" if k > 1e-3 else "right" if k < -1e-3 else "straight"
    pace = "slow" if float(np.mean(spec.speed)) < 8 else "fast"
    return f"{turn}-{pace}-{len(spec.agents)}"


# ----------------------------------------------------- inputs and bundle

@dataclass
class ConditioningInputs:
    """Raw conditioning for a batch. Shapes: B batch, T latent steps, N cameras."""
    metadata: torch.Tensor  # (B, T, M) long
    clip: torch.Tensor  # (B, T, Dc)
    scenario: torch.Tensor  # (B, T, Ds)
    agents: torch.Tensor  # (B, T, N, Bmax, 13)
    agent_valid: torch.Tensor  # (B, T, N, Bmax) bool
    speed: torch.Tensor  # (B, T) symlog-normalized
    curvature: torch.Tensor  # (B, T) symlog-normalized
    intrinsics: torch.Tensor  # (B, N, 4)
    extrinsics: torch.Tensor  # (B, N, 16)
    distortion: torch.Tensor  # (B, N, D)
    timestamps: torch.Tensor  # (B, T) relative, in [-1, 1]
    present: dict  # variable name -> (B,) bool

    @property
    def batch_size(self) -> int:
        return self.metadata.shape[0]

    def with_present(self, present: dict) -> "ConditioningInputs":
        return replace(self, present={k: v.clone() for k, v in present.items()})

    def unconditional(self) -> "ConditioningInputs":
        return self.with_present({k: torch.zeros_like(v) for k, v in self.present.items()})

    def map(self, fn) -> "ConditioningInputs":
        kw = {f.name: fn(getattr(self, f.name)) for f in fields(self) if f.name != "present"}
        return ConditioningInputs(**kw, present={k: fn(v) for k, v in self.present.items()})

    def index(self, idx) -> "ConditioningInputs":
        return self.map(lambda t: t[idx])

    def time_slice(self, lo: int, hi: int) -> "ConditioningInputs":
        """Sub-window along the latent time axis (camera fields untouched)."""
        timed = {"metadata", "clip", "scenario", "agents", "agent_valid", "speed", "curvature", "timestamps"}
        kw = {f.name: (getattr(self, f.name)[:, lo:hi] if f.name in timed else getattr(self, f.name))
              for f in fields(self) if f.name != "present"}
        return ConditioningInputs(**kw, present=dict(self.present))

    @staticmethod
    def concat(items: Sequence["ConditioningInputs"], dim: int = 0) -> "ConditioningInputs":
        kw = {f.name: torch.cat([getattr(i, f.name) for i in items], dim)
              for f in fields(ConditioningInputs) if f.name != "present"}
        present = {k: torch.cat([i.present[k] for i in items]) for k in items[0].present}
        return ConditioningInputs(**kw, present=present)


@dataclass
class ConditioningBundle:
    tokens: torch.Tensor  # (B, T, K, C) cross-attention tokens
    action: torch.Tensor  # (B, T, C) adaptive-norm input
    camera: torch.Tensor  # (B, N, C)
    timestamp: torch.Tensor  # (B, T, C)
    present: dict


def inputs_from_sample(sample: synth.VideoSample, cfg: ConditioningConfig, temporal_factor: int = 8,
                       providers: Optional[tuple] = None, present_index: int = 0,
                       present: Optional[dict] = None) -> ConditioningInputs:
    """Per-latent-timestep conditioning (batch of one) for a rendered sample."""
    spec = sample.spec
    T_v = sample.frames.shape[0] if sample.frames is not None else len(spec.speed)
    T = T_v // temporal_factor
    centers = [i * temporal_factor + temporal_factor // 2 for i in range(T)]
    groups = np.arange(T_v).reshape(T, temporal_factor)
    meta = spec.metadata()
    md = np.zeros((T, len(cfg.metadata_fields)), np.int64)
    for j, name in enumerate(cfg.metadata_fields):
        if name == "traffic_light":
            md[:, j] = [synth.TRAFFIC_LIGHTS.index(spec.traffic_light[g[0]]) for g in groups]
        else:
            md[:, j] = meta[name]
    clip_p, scen_p = providers or (StubEmbeddingProvider(cfg.clip_dim, 0), StubEmbeddingProvider(cfg.scenario_dim, 1))
    clip = np.tile(clip_p(clip_prompt(spec)), (T, 1))
    scen = np.tile(scen_p(scenario_key(spec)), (T, 1))
    feats = build_agent_features(spec.agents, sample.cameras, centers, cfg.b_max)
    speed = symlog(np.asarray(spec.speed)[groups].mean(1), SymlogParams(*cfg.speed_symlog))
    curv = symlog(np.asarray(spec.curvature)[groups].mean(1), SymlogParams(*cfg.curvature_symlog))
    intr, ext, dist = camera_arrays(sample.cameras, cfg.distortion_dim)
    ts = np.asarray(sample.timestamps)[groups].mean(1)
    rel = relative_times(ts, present_index, cfg.timestamp_half_span)
    f32 = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float32)[None]
    present = present or {v: True for v in cfg.variables()}
    return ConditioningInputs(
        metadata=torch.as_tensor(md)[None], clip=f32(clip), scenario=f32(scen),
        agents=f32(feats.values), agent_valid=torch.as_tensor(feats.validity)[None],
        speed=f32(speed), curvature=f32(curv), intrinsics=f32(intr), extrinsics=f32(ext),
        distortion=f32(dist), timestamps=f32(rel),
        present={k: torch.tensor([bool(present.get(k, True))]) for k in cfg.variables()},
    )


class ConditioningEncoder(nn.Module):
    def __init__(self, cfg: ConditioningConfig, dim: int):
        super().__init__()
        self.cfg = cfg
        self.dim = dim
        self.metadata = nn.ModuleDict({k: nn.Embedding(n, dim) for k, n in cfg.taxonomy.items()})
        self.clip_proj = nn.Linear(cfg.clip_dim, dim)
        self.scenario_proj = nn.Linear(cfg.scenario_dim, dim)
        # each agent feature dimension gets its own embedding vector and bias
        self.agent_dim_weight = nn.Parameter(torch.randn(AGENT_FEATURE_DIM, dim) * 0.5)
        self.agent_dim_bias = nn.Parameter(torch.zeros(AGENT_FEATURE_DIM, dim))
        self.agent_mlp = nn.Sequential(nn.SiLU(), nn.Linear(dim, dim))
        self.agent_empty = nn.Parameter(torch.randn(dim) * 0.02)
        self.speed_proj = nn.Linear(1, dim)
        self.curvature_proj = nn.Linear(1, dim)
        self.action_mlp = nn.Sequential(nn.SiLU(), nn.Linear(dim, dim))
        self.null = nn.ParameterDict({k: nn.Parameter(torch.randn(dim) * 0.02) for k in cfg.variables()})
        self.camera = CameraEncoder(dim, cfg.distortion_dim)
        self.timestamp = TimestampEncoder(cfg.fourier_pairs, dim)

    def embed_metadata(self, metadata: torch.Tensor) -> torch.Tensor:
        """(…, M) category indices -> (…, M, C), one token per field."""
        toks = []
        for j, (name, n) in enumerate(self.cfg.taxonomy.items()):
            idx = metadata[..., j]
            if (idx < 0).any() or (idx >= n).any():
                raise ValueError(f"metadata field {name!r} index outside 0..{n - 1}")
            toks.append(self.metadata[name](idx))
        return torch.stack(toks, dim=-2)

    def project_external(self, vec: torch.Tensor, source: str) -> torch.Tensor:
        if source == "clip":
            return self.clip_proj(vec)
        if source == "scenario":
            return self.scenario_proj(vec)
        raise ValueError(f"unknown embedding source {source!r}")

    def embed_agents(self, values, valid, camera_enc):
        """values (B, T, N, Bm, 13) -> (B, T, N*Bm, C)."""
        e = (values[..., None] * self.agent_dim_weight + self.agent_dim_bias).sum(-2)
        e = self.agent_mlp(e)
        e = torch.where(valid[..., None], e, self.agent_empty.to(e))
        e = e + camera_enc[:, None, :, None, :]
        return e.flatten(2, 3)

    def forward(self, c: ConditioningInputs) -> ConditioningBundle:
        """Assemble the bundle; absent variables are swapped for their null tokens."""
        B, T = c.metadata.shape[:2]
        dtype = self.clip_proj.weight.dtype
        for name, t in (("clip", c.clip), ("agents", c.agents), ("speed", c.speed), ("timestamps", c.timestamps)):
            if t.shape[0] != B or t.shape[1] != T:
                raise ValueError(f"conditioning {name} has leading shape {tuple(t.shape[:2])}, expected {(B, T)}")

        def gate(name, emb):
            flag = c.present[name].to(torch.bool).reshape(B, *([1] * (emb.dim() - 1)))
            return torch.where(flag, emb, self.null[name].to(emb))

        camera = self.camera(c.intrinsics.to(dtype), c.extrinsics.to(dtype), c.distortion.to(dtype))
        meta = self.embed_metadata(c.metadata)
        toks = [gate(name, meta[:, :, j]) for j, name in enumerate(self.cfg.metadata_fields)]
        toks.append(gate("clip", self.project_external(c.clip.to(dtype), "clip")))
        toks.append(gate("scenario", self.project_external(c.scenario.to(dtype), "scenario")))
        tokens = torch.stack(toks, dim=2)
        agents = gate("agents", self.embed_agents(c.agents.to(dtype), c.agent_valid, camera))
        tokens = torch.cat([tokens, agents], dim=2)

        action = gate("speed", self.speed_proj(c.speed.to(dtype)[..., None])) + \
            gate("curvature", self.curvature_proj(c.curvature.to(dtype)[..., None]))
        action = self.action_mlp(action)
        return ConditioningBundle(tokens, action, camera, self.timestamp(c.timestamps.to(dtype)), dict(c.present))


def conditioning_config_fields() -> list[str]:
    return [f.name for f in fields(ConditioningConfig)]
