"""End-to-end orchestration: data rendering, tokenizer and world-model training, generation.

Each stage writes into a directory named after the hash of the settings it
depends on, below the cache root ($MINIWM_CACHE, default ~/.cache/miniwm):
    tokenizer-<h>/tokenizer.ckpt        tokenizer weights, EMA, optimizer, RNG
    latents-<h>/latents_train.ckpt      encoded training set (latent mean/log-std + conditioning)
    latents-<h>/latents_val.ckpt        encoded validation set, plus scene specs in the manifest
    latents-<h>/val_frames.npy          uint8 real validation videos for feature statistics
    world_model-<h>/wm_step{k}.ckpt     world-model checkpoints at the configured fractions
    */*.log.jsonl                       training metrics
Changing a world-model setting therefore reuses the trained tokenizer and encoded latents.
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from . import synth
from .conditioning import ConditioningInputs, StubEmbeddingProvider, inputs_from_sample
from .config import RunConfig
from .inference import GuidanceConfig, GuidedVelocity, generate_from_scratch, linear_quadratic_schedule
from .tokenizer import TokenizerObjective, VideoTokenizer
from .training import (EmaState, LatentBatch, LrSchedule, TaskMixture, TrainState, WorldModelRecipe, tokenizer_loss_fn,
                       train_step, wm_loss_fn)
from .world_model import TauMixture, WorldModel, denormalize_latents

log = logging.getLogger(__name__)


def cache_root() -> Path:
    return Path(os.environ.get("MINIWM_CACHE", Path.home() / ".cache" / "miniwm"))


def rig(cfg: RunConfig):
    d = cfg.dataset
    return synth.standard_rig(d.n_cameras, d.width, d.height)


def balance(cfg: RunConfig) -> Optional[synth.BalanceGrid]:
    return None if cfg.dataset.balance is None else synth.BalanceGrid(np.asarray(cfg.dataset.balance))


def providers(cfg: RunConfig, embedding_seed: int = 0):
    c = cfg.conditioning
    return StubEmbeddingProvider(c.clip_dim, 2 * embedding_seed), StubEmbeddingProvider(c.scenario_dim, 2 * embedding_seed + 1)


def _append_log(path: Path, row: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(row, sort_keys=True) + "\n")


# ------------------------------------------------------------------ data

def render_tokenizer_pool(cfg: RunConfig, n_clips: int, seed: int) -> np.ndarray:
    """(n_clips, T_v, H, W, 3) uint8 single-camera clips; every render contributes all its cameras."""
    d = cfg.dataset
    rng = np.random.default_rng([seed, 11])
    cams = rig(cfg)
    out = np.empty((n_clips, d.tokenizer_frames, d.height, d.width, 3), np.uint8)
    i = 0
    while i < n_clips:
        spec = synth.sample_scene_spec(rng, balance(cfg), T_v=d.tokenizer_frames, fps=d.fps,
                                       b_max=cfg.conditioning.b_max, max_agents=d.max_agents)
        s = synth.render_scene(spec, cams, d.tokenizer_frames, d.fps, cfg.conditioning.b_max)
        for n in range(len(cams)):
            if i < n_clips:
                out[i] = np.round(s.frames[:, n] * 255).astype(np.uint8)
                i += 1
    return out


def to_float(frames_u8) -> torch.Tensor:
    return torch.as_tensor(np.asarray(frames_u8)).float() / 255.0


def render_wm_sample(cfg: RunConfig, spec: synth.SceneSpec) -> synth.VideoSample:
    d = cfg.dataset
    s = synth.render_scene(spec, rig(cfg), d.wm_frames, d.fps, cfg.conditioning.b_max)
    s.frames = np.round(s.frames * 255).astype(np.uint8).astype(np.float32) / 255.0
    return s


def wm_specs(cfg: RunConfig, n: int, seed: int) -> list:
    d = cfg.dataset
    rng = np.random.default_rng(seed)
    return [synth.sample_scene_spec(rng, balance(cfg), T_v=d.wm_frames, fps=d.fps, b_max=cfg.conditioning.b_max,
                                    max_agents=d.max_agents) for _ in range(n)]


@torch.no_grad()
def encode_video(tokenizer: VideoTokenizer, frames) -> tuple[torch.Tensor, torch.Tensor]:
    """(T_v, N, H, W, 3) -> latent mean and log-std, each (T, N, h, w, L)."""
    f = torch.as_tensor(np.asarray(frames), dtype=torch.float32).permute(1, 0, 2, 3, 4)
    dist = tokenizer.encode(f)
    return dist.mean.permute(1, 0, 2, 3, 4), dist.log_std.permute(1, 0, 2, 3, 4)


@torch.no_grad()
def decode_latents(tokenizer: VideoTokenizer, latents) -> torch.Tensor:
    """(B, T, N, h, w, L) raw latents -> (B, T*8, N, H, W, 3) frames clipped to [0, 1]."""
    B, T, N = latents.shape[:3]
    z = latents.permute(0, 2, 1, 3, 4, 5).reshape(B * N, T, *latents.shape[3:])
    frames = tokenizer.rolling_decode(z).clamp(0, 1)
    return frames.reshape(B, N, *frames.shape[1:]).permute(0, 2, 1, 3, 4, 5)


def cond_tensors(cond: ConditioningInputs, prefix: str = "cond/") -> dict:
    out = {prefix + f.name: getattr(cond, f.name) for f in fields(cond) if f.name != "present"}
    out.update({f"{prefix}present/{k}": v for k, v in cond.present.items()})
    return out


def cond_from_tensors(t: dict, prefix: str = "cond/") -> ConditioningInputs:
    kw = {f.name: t[prefix + f.name] for f in fields(ConditioningInputs) if f.name != "present"}
    kw["metadata"] = kw["metadata"].long()
    kw["agent_valid"] = kw["agent_valid"].bool()
    pp = prefix + "present/"
    present = {k[len(pp):]: v.bool() for k, v in t.items() if k.startswith(pp)}
    return ConditioningInputs(**kw, present=present)


@dataclass
class LatentSet:
    mean: torch.Tensor
    log_std: torch.Tensor
    cond: ConditioningInputs
    specs: Optional[list] = None

    def __len__(self):
        return self.mean.shape[0]

    def batch(self, idx) -> LatentBatch:
        idx = torch.as_tensor(idx)
        return LatentBatch(self.mean[idx], self.log_std[idx], self.cond.index(idx))

    def save(self, path, config_hash: str) -> str:
        t = {"mean": self.mean, "log_std": self.log_std, **cond_tensors(self.cond)}
        meta = {"config_hash": config_hash}
        if self.specs is not None:
            meta["specs"] = [s.to_json() for s in self.specs]
        return ckpt.save_archive(path, t, meta)

    @classmethod
    def load(cls, path, config_hash: Optional[str] = None) -> "LatentSet":
        t, meta = ckpt.load_archive(path, config_hash)
        specs = [synth.SceneSpec.from_json(s) for s in meta["specs"]] if "specs" in meta else None
        return cls(t["mean"], t["log_std"], cond_from_tensors(t), specs)


def encode_specs(cfg: RunConfig, tokenizer: VideoTokenizer, specs: list, keep_frames: int = 0,
                 embedding_seed: int = 0, progress: bool = False):
    """Render, encode and build conditioning for each spec. Optionally keep the first frames as uint8."""
    means, stds, conds, frames = [], [], [], []
    prov = providers(cfg, embedding_seed)
    t0 = time.time()
    for i, spec in enumerate(specs):
        s = render_wm_sample(cfg, spec)
        m, ls = encode_video(tokenizer, s.frames)
        means.append(m)
        stds.append(ls)
        conds.append(inputs_from_sample(s, cfg.conditioning, cfg.tokenizer.temporal_factor, prov))
        if i < keep_frames:
            frames.append(np.round(s.frames * 255).astype(np.uint8))
        if progress and (i + 1) % 200 == 0:
            log.info("encoded %d/%d samples (%.0fs)", i + 1, len(specs), time.time() - t0)
    ls = LatentSet(torch.stack(means), torch.stack(stds), ConditioningInputs.concat(conds), specs)
    return ls, (np.stack(frames) if frames else None)


# -------------------------------------------------------------- building

def build_tokenizer(cfg: RunConfig) -> VideoTokenizer:
    torch.manual_seed(cfg.dataset.seed)
    return VideoTokenizer(cfg.tokenizer)


def build_world_model(cfg: RunConfig, seed: int = 0) -> WorldModel:
    torch.manual_seed(seed)
    return WorldModel(cfg.world_model_config())


def tokenizer_state(cfg: RunConfig, model: VideoTokenizer, seed: int) -> TrainState:
    tr = cfg.training
    sched = LrSchedule(tr.tokenizer_warmup, tr.tokenizer_lr, tr.tokenizer_final_lr, tr.tokenizer_steps,
                       "cooldown", tr.tokenizer_cooldown)
    return TrainState.create(model, sched, tr.tokenizer_betas, tr.weight_decay, tr.tokenizer_ema, seed,
                             tr.clip_norm, namespace="tokenizer")


def wm_state(cfg: RunConfig, model: WorldModel, seed: int) -> TrainState:
    tr = cfg.training
    sched = LrSchedule(tr.wm_warmup, tr.wm_lr, tr.wm_final_lr, tr.wm_steps, "cosine")
    return TrainState.create(model, sched, tr.wm_betas, tr.weight_decay, tr.wm_ema, seed, tr.clip_norm,
                             namespace="world_model")


def wm_recipe(cfg: RunConfig, latent_mean: float, latent_std: float) -> WorldModelRecipe:
    tr = cfg.training
    return WorldModelRecipe(latent_mean, latent_std, TaskMixture(*tr.task_mixture),
                            TauMixture(tuple(tuple(m) for m in tr.tau_mixture)), tr.p_drop_each, tr.p_drop_all,
                            tr.camera_dropout, cfg.conditioning.agent_feature_dropout)


def load_ema_tokenizer(cfg: RunConfig, path) -> VideoTokenizer:
    model = build_tokenizer(cfg)
    tensors, meta = ckpt.load_archive(path, cfg.stage_hash("tokenizer"))
    sd = {k[len("tokenizer_ema/"):]: v for k, v in tensors.items() if k.startswith("tokenizer_ema/")}
    model.load_state_dict({**model.state_dict(), **sd})
    model.eval()
    return model


def load_ema_world_model(cfg: RunConfig, path) -> tuple[WorldModel, dict]:
    """EMA world-model weights and the checkpoint manifest (holds the latent statistics)."""
    model = build_world_model(cfg)
    tensors, meta = ckpt.load_archive(path, cfg.stage_hash("world_model"))
    sd = {k[len("world_model_ema/"):]: v for k, v in tensors.items() if k.startswith("world_model_ema/")}
    model.load_state_dict({**model.state_dict(), **sd})
    model.eval()
    return model, meta


# -------------------------------------------------------------- training

def train_tokenizer(cfg: RunConfig, out: Path, seed: int = 0, steps: Optional[int] = None,
                    resume: Optional[Path] = None, pool: Optional[np.ndarray] = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    tr = cfg.training
    steps = tr.tokenizer_steps if steps is None else steps
    if pool is None:
        pool = render_tokenizer_pool(cfg, cfg.dataset.n_tokenizer_clips, cfg.dataset.seed)
    model = build_tokenizer(cfg)
    state = tokenizer_state(cfg, model, seed)
    if resume is not None:
        state.load(resume, cfg.stage_hash("tokenizer"))
    loss_fn = tokenizer_loss_fn(TokenizerObjective(cfg.tokenizer, tr.perceptual_frame_stride))
    log_path = out / "tokenizer.log.jsonl"
    t0 = time.time()
    while state.step < steps:
        idx = state.rng.choice(len(pool), tr.tokenizer_batch, replace=False)
        m = train_step(state, loss_fn, to_float(pool[idx]))
        if state.step % tr.log_every == 0 or state.step == steps:
            m["elapsed"] = time.time() - t0
            _append_log(log_path, m)
            log.info("tokenizer step %d loss %.4f", state.step, m["loss"])
    path = out / "tokenizer.ckpt"
    state.save(path, cfg.stage_hash("tokenizer"))
    return path


def latent_statistics(ls: LatentSet, fixed_mean: Optional[float], fixed_std: Optional[float]) -> tuple[float, float]:
    """Normalization constants: configured values, or the mean/std of sampled training latents."""
    if fixed_std is not None:
        return float(fixed_mean or 0.0), float(fixed_std)
    gen = torch.Generator().manual_seed(0)
    z = ls.mean + ls.log_std.exp() * torch.randn(ls.mean.shape, generator=gen)
    return float(fixed_mean or 0.0), float(z.std())


def train_world_model(cfg: RunConfig, out: Path, train_set: LatentSet, seed: int = 0, steps: Optional[int] = None,
                      resume: Optional[Path] = None, checkpoint_steps: Optional[list] = None,
                      val_set: Optional[LatentSet] = None) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    tr = cfg.training
    steps = tr.wm_steps if steps is None else steps
    wmc = cfg.world_model_config()
    mu, sd = latent_statistics(train_set, wmc.latent_mean, wmc.latent_std)
    model = build_world_model(cfg, seed)
    state = wm_state(cfg, model, seed)
    if resume is not None:
        meta = state.load(resume, cfg.stage_hash("world_model"))
        mu, sd = meta["latent_mean"], meta["latent_std"]
    loss_fn = wm_loss_fn(wm_recipe(cfg, mu, sd))
    if checkpoint_steps is None:
        checkpoint_steps = sorted({max(1, int(round(f * steps))) for f in tr.checkpoint_fractions})
    log_path = out / "world_model.log.jsonl"
    saved, t0 = [], time.time()
    extra = {"latent_mean": mu, "latent_std": sd}
    while state.step < steps:
        idx = state.rng.choice(len(train_set), tr.wm_batch, replace=False)
        m = train_step(state, loss_fn, train_set.batch(idx))
        if state.step % tr.log_every == 0 or state.step == steps:
            m["elapsed"] = time.time() - t0
            _append_log(log_path, m)
            log.info("world model step %d loss %.4f", state.step, m["loss"])
        if state.step in checkpoint_steps:
            p = out / f"wm_step{state.step}.ckpt"
            state.save(p, cfg.stage_hash("world_model"), extra)
            saved.append(p)
    return saved


# ------------------------------------------------------------ generation

def generation_schedule(cfg: RunConfig):
    i = cfg.inference
    return linear_quadratic_schedule(i.steps, i.linear_steps, i.linear_scale)


@torch.no_grad()
def generate_videos(cfg: RunConfig, model: WorldModel, tokenizer: VideoTokenizer, meta: dict,
                    cond: ConditioningInputs, seed: int, guidance_scale: Optional[float] = None,
                    batch: int = 25) -> tuple[torch.Tensor, torch.Tensor]:
    """From-scratch generation for every conditioning row; returns (latents, frames)."""
    wmc = model.cfg
    scale = cfg.inference.guidance_scale if guidance_scale is None else guidance_scale
    sched = generation_schedule(cfg)
    gen = torch.Generator().manual_seed(seed)
    lat, vids = [], []
    for lo in range(0, cond.batch_size, batch):
        c = cond.index(slice(lo, lo + batch))
        shape = (c.batch_size, wmc.n_latent_frames, wmc.n_cameras, wmc.latent_h, wmc.latent_w, wmc.latent_dim)
        vel = GuidedVelocity(model, c, GuidanceConfig(scale))
        x = generate_from_scratch(vel, shape, sched, gen)
        z = denormalize_latents(x, meta["latent_mean"], meta["latent_std"])
        lat.append(z)
        vids.append(decode_latents(tokenizer, z))
    return torch.cat(lat), torch.cat(vids)


# ----------------------------------------------------------------- toy run

@dataclass
class ToyRun:
    dir: Path
    cfg: RunConfig
    tokenizer_ckpt: Path
    wm_ckpts: list
    train_latents: Path
    val_latents: Path
    val_frames: Path

    def complete(self) -> bool:
        return all(p.exists() for p in [self.tokenizer_ckpt, *self.wm_ckpts, self.train_latents,
                                         self.val_latents, self.val_frames])


def toy_run_paths(cfg: RunConfig, root: Optional[Path] = None) -> ToyRun:
    """Each stage lives in a directory named after the hash of the settings it depends on."""
    root = root or cache_root()
    tok_dir = root / f"tokenizer-{cfg.stage_hash('tokenizer')}"
    lat_dir = root / f"latents-{cfg.stage_hash('latents')}"
    wm_dir = root / f"world_model-{cfg.stage_hash('world_model')}"
    steps = cfg.training.wm_steps
    ck = [wm_dir / f"wm_step{max(1, int(round(f * steps)))}.ckpt" for f in sorted(cfg.training.checkpoint_fractions)]
    return ToyRun(wm_dir, cfg, tok_dir / "tokenizer.ckpt", ck, lat_dir / "latents_train.ckpt",
                  lat_dir / "latents_val.ckpt", lat_dir / "val_frames.npy")


def run_toy_pipeline(cfg: RunConfig, root: Optional[Path] = None, seed: int = 0, n_val_frames: int = 64) -> ToyRun:
    """Train everything needed for the end-to-end checks; every stage is skipped when its artifact exists."""
    run = toy_run_paths(cfg, root)
    for p in (run.tokenizer_ckpt, run.train_latents, run.dir / "x"):
        p.parent.mkdir(parents=True, exist_ok=True)
        (p.parent / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    if not run.tokenizer_ckpt.exists():
        log.info("training tokenizer")
        train_tokenizer(cfg, run.tokenizer_ckpt.parent, seed)
    tok = load_ema_tokenizer(cfg, run.tokenizer_ckpt)
    lat_hash = cfg.stage_hash("latents")
    if not run.train_latents.exists():
        log.info("encoding training set")
        ls, _ = encode_specs(cfg, tok, wm_specs(cfg, cfg.dataset.n_train, cfg.dataset.seed + 1), progress=True)
        ls.specs = None
        ls.save(run.train_latents, lat_hash)
    if not (run.val_latents.exists() and run.val_frames.exists()):
        log.info("encoding validation set")
        ls, frames = encode_specs(cfg, tok, wm_specs(cfg, cfg.dataset.n_val, cfg.dataset.seed + 2), n_val_frames)
        ls.save(run.val_latents, lat_hash)
        np.save(run.val_frames, frames)
    if not all(p.exists() for p in run.wm_ckpts):
        log.info("training world model")
        train_world_model(cfg, run.dir, LatentSet.load(run.train_latents, lat_hash), seed)
    return run
