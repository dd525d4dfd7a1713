"""Run configuration: presets, JSON parsing with strict keys, stable hashing."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

from .conditioning import ConditioningConfig
from .tokenizer import TokenizerConfig, latent_shape
from .world_model import WorldModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    n_cameras: int = 2
    height: int = 64
    width: int = 128
    fps: float = 25.0
    tokenizer_frames: int = 24
    wm_frames: int = 48
    max_agents: int = 4
    n_tokenizer_clips: int = 600
    n_train: int = 1600
    n_val: int = 128
    seed: int = 0
    balance: Optional[list] = None  # (3, 5, 4) nested weights; None = uniform


@dataclass
class TrainingConfig:
    tokenizer_steps: int = 3000
    tokenizer_batch: int = 8
    tokenizer_lr: float = 1e-3
    tokenizer_final_lr: float = 1e-4
    tokenizer_warmup: int = 150
    tokenizer_cooldown: int = 600
    tokenizer_betas: list = field(default_factory=lambda: [0.9, 0.95])
    tokenizer_ema: float = 0.995
    perceptual_frame_stride: int = 2
    wm_steps: int = 10000
    wm_batch: int = 32
    wm_lr: float = 5e-4
    wm_final_lr: float = 5e-5
    wm_warmup: int = 200
    wm_betas: list = field(default_factory=lambda: [0.9, 0.99])
    wm_ema: float = 0.995
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    task_mixture: list = field(default_factory=lambda: [0.7, 0.2, 0.1])
    tau_mixture: list = field(default_factory=lambda: [[0.5, 1.4, 0.8], [-3.0, 1.0, 0.2]])
    p_drop_each: float = 0.8
    p_drop_all: float = 0.1
    camera_dropout: float = 0.1
    checkpoint_fractions: list = field(default_factory=lambda: [0.1, 1.0])
    log_every: int = 50


@dataclass
class InferenceConfig:
    steps: int = 50
    linear_steps: int = 25
    linear_scale: int = 1000
    guidance_scale: float = 3.0
    context_latents: int = 3
    edit_tau: float = 0.5


@dataclass
class MetricsConfig:
    extractor_seed: int = 99
    n_val: int = 64


WM_KEYS = [f.name for f in fields(WorldModelConfig) if f.name != "conditioning"]


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    world_model: dict = field(default_factory=dict)  # WorldModelConfig fields except conditioning
    training: TrainingConfig = field(default_factory=TrainingConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    preset: str = "toy"

    def world_model_config(self) -> WorldModelConfig:
        return WorldModelConfig(**self.world_model, conditioning=self.conditioning)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def stage_hash(self, stage: str) -> str:
        """Hash of the settings a pipeline stage depends on: tokenizer, latents or world_model."""
        d = self.to_dict()
        tr = d["training"]
        tok = {"dataset": d["dataset"], "tokenizer": d["tokenizer"],
               "training": {k: v for k, v in tr.items() if k.startswith("tokenizer") or
                            k in ("perceptual_frame_stride", "weight_decay", "clip_norm")}}
        if stage == "tokenizer":
            return config_hash(tok)
        lat = {**tok, "conditioning": d["conditioning"]}
        if stage == "latents":
            return config_hash(lat)
        if stage == "world_model":
            return config_hash({**lat, "world_model": d["world_model"], "training": tr})
        raise ValueError(f"unknown stage {stage!r}")

    def validate(self) -> None:
        d, tok = self.dataset, self.tokenizer
        try:
            tok.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        for name in ("tokenizer_frames", "wm_frames"):
            if getattr(d, name) % tok.temporal_factor:
                raise ConfigError(f"dataset.{name} must be a multiple of {tok.temporal_factor}")
        if d.height % tok.spatial_factor or d.width % tok.spatial_factor:
            raise ConfigError(f"frame size must be a multiple of {tok.spatial_factor}")
        if set(tok.loss_weights) != {"distill", "kl", "l1", "l2", "perceptual"}:
            raise ConfigError("tokenizer.loss_weights needs exactly distill, kl, l1, l2, perceptual")
        missing = set(ConditioningConfig().taxonomy) ^ set(self.conditioning.taxonomy)
        if missing:
            raise ConfigError(f"conditioning.taxonomy fields differ from the metadata schema: {sorted(missing)}")
        wm = self.world_model_config()
        T, H, W, L = latent_shape(tok, (d.wm_frames, d.height, d.width, 3))
        expect = {"n_latent_frames": T, "latent_h": H, "latent_w": W, "latent_dim": L, "n_cameras": d.n_cameras}
        for k, v in expect.items():
            if getattr(wm, k) != v:
                raise ConfigError(f"world_model.{k}={getattr(wm, k)} inconsistent with dataset/tokenizer ({v})")
        if wm.hidden % wm.heads:
            raise ConfigError("world_model.hidden must be divisible by heads")
        if self.preset == "toy" and wm.n_tokens() > 2048:
            raise ConfigError(f"toy token count {wm.n_tokens()} exceeds 2048")
        tm = self.training.task_mixture
        if len(tm) != 3 or min(tm) < 0 or abs(sum(tm) - 1) > 1e-9:
            raise ConfigError("training.task_mixture must be three nonnegative numbers summing to 1")
        inf = self.inference
        if not 0 <= inf.linear_steps < inf.steps:
            raise ConfigError("inference.linear_steps must lie in [0, steps)")
        if not 0 < inf.context_latents < wm.n_latent_frames:
            raise ConfigError("inference.context_latents must lie in 1..T-1")
        if not 0 < inf.edit_tau < 1:
            raise ConfigError("inference.edit_tau must lie in (0, 1)")


def config_hash(d: dict) -> str:
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _merge(obj, updates: dict, path: str):
    """Apply a dict of overrides to a dataclass (or plain dict section), rejecting unknown keys."""
    if not isinstance(updates, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    if isinstance(obj, dict):
        allowed = WM_KEYS
        for k, v in updates.items():
            if k not in allowed:
                raise ConfigError(f"unknown config key {path}.{k}")
            obj[k] = v
        return obj
    names = {f.name: f for f in fields(obj)}
    for k, v in updates.items():
        if k not in names:
            raise ConfigError(f"unknown config key {path + '.' if path else ''}{k}")
        cur = getattr(obj, k)
        if dataclasses.is_dataclass(cur) or (isinstance(cur, dict) and k == "world_model"):
            _merge(cur, v, f"{path + '.' if path else ''}{k}")
        else:
            setattr(obj, k, copy.deepcopy(v))
    return obj


def toy_preset() -> RunConfig:
    cfg = RunConfig()
    cfg.world_model = {k: getattr(WorldModelConfig(), k) for k in WM_KEYS}
    cfg.world_model["latent_std"] = None  # estimated from the encoded toy data
    return cfg


def paper_shape_preset() -> RunConfig:
    cfg = toy_preset()
    cfg.preset = "paper-shape"
    _merge(cfg, {
        "dataset": {"n_cameras": 5, "height": 448, "width": 960, "tokenizer_frames": 24, "wm_frames": 48},
        "conditioning": {"b_max": 8},
        "world_model": {"n_blocks": 22, "hidden": 4096, "heads": 32, "n_latent_frames": 6, "n_cameras": 5,
                        "latent_h": 14, "latent_w": 30, "latent_dim": 64, "latent_mean": 0.0, "latent_std": 0.32},
        "training": {
            "tokenizer_steps": 300_000, "tokenizer_batch": 128, "tokenizer_lr": 1e-4, "tokenizer_final_lr": 1e-5,
            "tokenizer_warmup": 2500, "tokenizer_cooldown": 5000, "tokenizer_betas": [0.9, 0.95],
            "tokenizer_ema": 0.9999, "perceptual_frame_stride": 1,
            "wm_steps": 460_000, "wm_batch": 256, "wm_lr": 5e-5, "wm_final_lr": 6.5e-6, "wm_warmup": 2500,
            "wm_betas": [0.9, 0.99], "wm_ema": 0.9999, "weight_decay": 0.1, "clip_norm": 1.0,
            "task_mixture": [0.7, 0.2, 0.1], "tau_mixture": [[0.5, 1.4, 0.8], [-3.0, 1.0, 0.2]],
            "p_drop_each": 0.8, "p_drop_all": 0.1, "camera_dropout": 0.1,
        },
        "inference": {"steps": 50, "linear_steps": 25, "linear_scale": 1000, "context_latents": 3},
    }, "")
    return cfg


PRESETS = {"toy": toy_preset, "paper-shape": paper_shape_preset}


def parse_config(source: Union[str, Path, dict, None] = "toy") -> RunConfig:
    """A preset name, a JSON file path, or a dict. Files/dicts may name a base `preset` and override keys."""
    if source is None:
        source = "toy"
    if isinstance(source, str) and source in PRESETS:
        cfg = PRESETS[source]()
        cfg.validate()
        return cfg
    if isinstance(source, dict):
        data = copy.deepcopy(source)
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config {source!r} is neither a preset ({', '.join(PRESETS)}) nor an existing file")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    base = data.pop("preset", "toy")
    if base not in PRESETS:
        raise ConfigError(f"unknown preset {base!r}")
    cfg = PRESETS[base]()
    _merge(cfg, data, "")
    cfg.validate()
    return cfg
