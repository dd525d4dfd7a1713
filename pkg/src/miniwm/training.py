"""Training loops for the tokenizer and the world model.

Randomness is split in two streams that are checkpointed with the weights:
a numpy Generator for discrete choices (tasks, masks, dropout, flow times)
and a torch Generator for Gaussian noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .conditioning import AgentFeatures, ConditioningInputs, agent_feature_dropout, agent_instance_dropout
from .world_model import (TauMixture, WorldModel, context_keep_mask, flow_matching_loss, make_flow_batch,
                          normalize_latents, sample_tau)

TASKS = ("scratch", "context", "inpaint")


@dataclass(frozen=True)
class TaskMixture:
    p_scratch: float = 0.7
    p_context: float = 0.2
    p_inpaint: float = 0.1

    def probabilities(self) -> np.ndarray:
        p = np.array([self.p_scratch, self.p_context, self.p_inpaint], dtype=np.float64)
        if np.any(p < 0) or not np.isfinite(p).all() or abs(p.sum() - 1) > 1e-9:
            raise ValueError(f"task mixture must be nonnegative and sum to 1, got {p.tolist()}")
        return p


@dataclass
class Task:
    kind: str
    t_ctx: int = 0


def sample_task(rng: np.random.Generator, mixture: TaskMixture, T: int) -> Task:
    kind = TASKS[int(rng.choice(3, p=mixture.probabilities()))]
    if kind == "context":
        if T < 2:
            raise ValueError("contextual prediction needs T >= 2")
        return Task(kind, int(rng.integers(1, T)))
    return Task(kind, 0)


def make_inpaint_mask(rng: np.random.Generator, T: int, N: int, H: int, W: int, camera_p: float = 0.5) -> np.ndarray:
    """Boolean (T, N, H, W) region to regenerate: a camera subset times a latent rectangle, all timesteps.

    Each camera joins with probability `camera_p` (at least one is forced);
    rectangle height and width are uniform in 1..H and 1..W at a uniform position.
    """
    cams = rng.random(N) < camera_p
    if not cams.any():
        cams[int(rng.integers(N))] = True
    h, w = int(rng.integers(1, H + 1)), int(rng.integers(1, W + 1))
    y0, x0 = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
    mask = np.zeros((T, N, H, W), bool)
    mask[:, cams, y0:y0 + h, x0:x0 + w] = True
    return mask


def expected_inpaint_fraction(N: int, H: int, W: int, camera_p: float = 0.5) -> float:
    """Closed-form mean of the masked fraction produced by make_inpaint_mask."""
    q = 1 - camera_p
    # forced camera: with prob q^N the subset is a single camera
    cams = (N * camera_p + q ** N * 1.0) / N
    return cams * (H + 1) / (2 * H) * (W + 1) / (2 * W)


def sample_drop_flags(rng: np.random.Generator, variables, p_each: float = 0.8, p_all: float = 0.1) -> dict:
    """Presence flags: all absent with prob p_all, otherwise each absent independently with prob p_each."""
    if rng.random() < p_all:
        return {v: False for v in variables}
    drops = rng.random(len(variables)) < p_each
    return {v: not bool(d) for v, d in zip(variables, drops)}


def conditioning_dropout(inputs: ConditioningInputs, rng: np.random.Generator,
                         p_each: float = 0.8, p_all: float = 0.1) -> ConditioningInputs:
    """Resample presence flags per batch element; already-absent variables stay absent."""
    B = inputs.batch_size
    variables = list(inputs.present)
    rows = [sample_drop_flags(rng, variables, p_each, p_all) for _ in range(B)]
    present = {v: inputs.present[v] & torch.tensor([r[v] for r in rows]) for v in variables}
    return inputs.with_present(present)


def camera_dropout(latents, rng: np.random.Generator, p: float = 0.1):
    """Returns (latents, camera mask (B, N)); at least one camera per sample survives.

    Latents pass through untouched; the model swaps dropped cameras for its
    learned placeholder token.
    """
    B, N = latents.shape[0], latents.shape[2]
    keep = rng.random((B, N)) >= p
    for b in range(B):
        if not keep[b].any():
            keep[b, int(rng.integers(N))] = True
    return latents, torch.as_tensor(keep)


# ------------------------------------------------------------------ EMA

@dataclass
class EmaState:
    shadow: dict
    decay: float = 0.9999

    @classmethod
    def from_module(cls, module: nn.Module, decay: float) -> "EmaState":
        return cls({k: v.detach().clone() for k, v in module.named_parameters()}, decay)

    def copy_to(self, module: nn.Module) -> None:
        with torch.no_grad():
            for k, p in module.named_parameters():
                p.copy_(self.shadow[k])


@torch.no_grad()
def ema_update(ema: EmaState, params: dict) -> EmaState:
    d = ema.decay
    for k, p in params.items():
        s = ema.shadow[k]
        if s.shape != p.shape:
            raise ValueError(f"EMA shadow {k} has shape {tuple(s.shape)}, parameter {tuple(p.shape)}")
        s.mul_(d).add_(p.detach(), alpha=1 - d)
    return ema


# ------------------------------------------------------------- schedules

@dataclass(frozen=True)
class LrSchedule:
    warmup_steps: int
    base_lr: float
    final_lr: float
    total_steps: int
    shape: str = "cosine"  # or "cooldown"
    cooldown_steps: int = 0

    def __post_init__(self):
        if self.shape not in ("cosine", "cooldown"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")
        if self.total_steps < self.warmup_steps:
            raise ValueError("total_steps must be >= warmup_steps")


def lr_at(step: int, s: LrSchedule) -> float:
    if step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    if step >= s.total_steps:
        return s.final_lr
    if s.shape == "cosine":
        span = s.total_steps - s.warmup_steps
        prog = (step - s.warmup_steps) / span if span else 1.0
        return s.final_lr + (s.base_lr - s.final_lr) * 0.5 * (1 + math.cos(math.pi * prog))
    start = max(s.total_steps - s.cooldown_steps, s.warmup_steps)
    if step < start:
        return s.base_lr
    prog = (step - start) / max(s.total_steps - start, 1)
    return s.base_lr + (s.final_lr - s.base_lr) * prog


# ------------------------------------------------------------ train state

@dataclass
class TrainState:
    model: nn.Module
    optimizer: torch.optim.Optimizer
    schedule: LrSchedule
    ema: EmaState
    rng: np.random.Generator
    gen: torch.Generator
    step: int = 0
    clip_norm: float = 1.0
    namespace: str = "model"

    @classmethod
    def create(cls, model: nn.Module, schedule: LrSchedule, betas=(0.9, 0.99), weight_decay: float = 0.1,
               ema_decay: float = 0.9999, seed: int = 0, clip_norm: float = 1.0, namespace: str = "model"):
        opt = torch.optim.AdamW([p for p in model.parameters() if p.requires_grad], lr=lr_at(0, schedule),
                                betas=tuple(betas), weight_decay=weight_decay, eps=1e-8)
        gen = torch.Generator().manual_seed(seed)
        return cls(model, opt, schedule, EmaState.from_module(model, ema_decay),
                   np.random.default_rng(seed), gen, 0, clip_norm, namespace)

    # checkpointing -------------------------------------------------------

    def tensors(self) -> dict:
        ns = self.namespace
        out = {f"{ns}/{k}": v for k, v in self.model.state_dict().items()}
        out.update({f"{ns}_ema/{k}": v for k, v in self.ema.shadow.items()})
        names = {id(p): k for k, p in self.model.named_parameters()}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                for key, val in self.optimizer.state.get(p, {}).items():
                    out[f"optim/{ns}/{names[id(p)]}/{key}"] = val
        out["rng/torch"] = self.gen.get_state()
        return out

    def meta(self, config_hash: str, extra: Optional[dict] = None) -> dict:
        return {"config_hash": config_hash, "step": self.step, "namespace": self.namespace,
                "rng_numpy": self.rng.bit_generator.state, **(extra or {})}

    def save(self, path, config_hash: str, extra: Optional[dict] = None) -> str:
        return ckpt.save_archive(path, self.tensors(), self.meta(config_hash, extra))

    def load(self, path, config_hash: Optional[str] = None) -> dict:
        tensors, meta = ckpt.load_archive(path, config_hash)
        self.load_tensors(tensors, meta)
        return meta

    def load_tensors(self, tensors: dict, meta: dict) -> None:
        ns = meta.get("namespace", self.namespace)
        if ns != self.namespace:
            raise ckpt.CheckpointError(f"checkpoint holds {ns!r}, expected {self.namespace!r}")
        sd = {k[len(ns) + 1:]: v for k, v in tensors.items() if k.startswith(ns + "/")}
        self.model.load_state_dict(sd, strict=True)
        for k in self.ema.shadow:
            self.ema.shadow[k] = tensors[f"{ns}_ema/{k}"].clone()
        named = dict(self.model.named_parameters())
        self.optimizer.state.clear()
        prefix = f"optim/{ns}/"
        for key, val in tensors.items():
            if key.startswith(prefix):
                pname, skey = key[len(prefix):].rsplit("/", 1)
                self.optimizer.state[named[pname]][skey] = val.clone()
        self.gen.set_state(tensors["rng/torch"])
        self.rng.bit_generator.state = meta["rng_numpy"]
        self.step = int(meta["step"])
        for g in self.optimizer.param_groups:
            g["lr"] = lr_at(self.step, self.schedule)


def train_step(state: TrainState, loss_fn: Callable, batch) -> dict:
    """One clipped AdamW step followed by an EMA update.

    `loss_fn(model, batch, state)` returns (loss, components dict).
    """
    model = state.model
    model.train()
    lr = lr_at(state.step, state.schedule)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.optimizer.zero_grad(set_to_none=False)
    loss, comps = loss_fn(model, batch, state)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at step {state.step}: {loss.item()}")
    loss.backward()
    params = [p for p in model.parameters() if p.requires_grad]
    grad_norm = torch.nn.utils.clip_grad_norm_(params, state.clip_norm)
    state.optimizer.step()
    ema_update(state.ema, dict(model.named_parameters()))
    state.step += 1
    metrics = {"loss": float(loss.detach()), "grad_norm": float(grad_norm), "lr": lr, "step": state.step}
    metrics.update({k: float(v.detach()) for k, v in comps.items()})
    return metrics


# ------------------------------------------------------------ world model

@dataclass
class LatentBatch:
    mean: torch.Tensor  # (B, T, N, H, W, L)
    log_std: torch.Tensor
    cond: ConditioningInputs


@dataclass
class WorldModelRecipe:
    """Everything the world-model loss needs besides the batch."""
    latent_mean: float
    latent_std: float
    task_mixture: TaskMixture = field(default_factory=TaskMixture)
    tau_mixture: TauMixture = field(default_factory=TauMixture)
    p_each: float = 0.8
    p_all: float = 0.1
    camera_p: float = 0.1
    agent_feature_p: float = 0.3


def _agent_dropout(cond: ConditioningInputs, rng: np.random.Generator, p: float) -> ConditioningInputs:
    vals, valid = [], []
    for b in range(cond.batch_size):
        f = AgentFeatures(cond.agents[b].numpy().astype(np.float64), cond.agent_valid[b].numpy())
        f = agent_feature_dropout(agent_instance_dropout(f, rng), rng, p)
        vals.append(torch.as_tensor(f.values, dtype=cond.agents.dtype))
        valid.append(torch.as_tensor(f.validity))
    out = cond.with_present(cond.present)
    out.agents, out.agent_valid = torch.stack(vals), torch.stack(valid)
    return out


def prepare_wm_inputs(batch: LatentBatch, recipe: WorldModelRecipe, rng: np.random.Generator,
                      gen: torch.Generator):
    """Draw latents, tasks, masks, flow times and dropout for one step."""
    z = batch.mean + batch.log_std.exp() * torch.randn(batch.mean.shape, generator=gen)
    x = normalize_latents(z, recipe.latent_mean, recipe.latent_std)
    B, T, N, H, W, _ = x.shape
    keep = torch.zeros((B, T, N, H, W), dtype=torch.bool)
    for b in range(B):
        task = sample_task(rng, recipe.task_mixture, T)
        if task.kind == "context":
            keep[b] = context_keep_mask(1, T, N, H, W, task.t_ctx)[0]
        elif task.kind == "inpaint":
            keep[b] = ~torch.as_tensor(make_inpaint_mask(rng, T, N, H, W))
    tau = torch.as_tensor(sample_tau(rng, B, recipe.tau_mixture), dtype=x.dtype)
    fb = make_flow_batch(x, tau, keep, generator=gen)
    cond = conditioning_dropout(batch.cond, rng, recipe.p_each, recipe.p_all)
    cond = _agent_dropout(cond, rng, recipe.agent_feature_p)
    _, cam_mask = camera_dropout(x, rng, recipe.camera_p)
    loss_mask = ~fb.keep & cam_mask[:, None, :, None, None]
    return fb, cond, cam_mask, loss_mask


def wm_loss_fn(recipe: WorldModelRecipe):
    def loss_fn(model: WorldModel, batch: LatentBatch, state: TrainState):
        fb, cond, cam_mask, loss_mask = prepare_wm_inputs(batch, recipe, state.rng, state.gen)
        bundle = model.encode_conditioning(cond)
        v_hat = model(fb.xt, fb.tau, bundle, fb.keep, cam_mask)
        loss = flow_matching_loss(v_hat, fb.v, loss_mask)
        return loss, {"flow": loss}
    return loss_fn


# -------------------------------------------------------------- tokenizer

def tokenizer_loss_fn(objective):
    def loss_fn(model, frames, state: TrainState):
        total, comps = objective(model, frames, state.gen)
        return total, comps
    return loss_fn
