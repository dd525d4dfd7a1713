"""Command-line entry point: `miniwm <subcommand> ...`.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import synth
from .conditioning import inputs_from_sample
from .config import ConfigError, RunConfig, parse_config

log = logging.getLogger("miniwm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    pass


def _tree_hash(path: Path) -> str:
    """Content hash over every file below `path` (relative names + bytes), manifest excluded."""
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        if f.name == "manifest.json":
            continue
        h.update(str(f.relative_to(path) if path.is_dir() else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, args, cfg: RunConfig, checkpoints: dict, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    m = {
        "command": ["miniwm", *sys.argv[1:]] if args.argv is None else ["miniwm", *args.argv],
        "subcommand": args.command,
        "seed": args.seed,
        "config_hash": cfg.hash(),
        "checkpoints": {k: ckpt.file_hash(v) for k, v in checkpoints.items() if v is not None},
        "output_hash": _tree_hash(out),
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(m, indent=1, sort_keys=True))


def _require(path, what: str, hint: str) -> Path:
    if path is None:
        raise DataError(f"missing {what}: {hint}")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} {p} does not exist: {hint}")
    return p


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


# --------------------------------------------------------------- commands

def cmd_make_dataset(args, cfg: RunConfig) -> None:
    from .pipeline import rig
    out = Path(args.out)
    d = cfg.dataset
    rng = np.random.default_rng(args.seed)
    cams = rig(cfg)
    frames = args.frames or d.wm_frames
    bal = None if d.balance is None else synth.BalanceGrid(np.asarray(d.balance))
    fence = (lambda x, y: x > 0.6) if args.geofence else None
    counts = {"train": 0, "val": 0}
    for i in range(args.n):
        spec = synth.sample_scene_spec(rng, bal, T_v=frames, fps=d.fps, b_max=cfg.conditioning.b_max,
                                       max_agents=d.max_agents)
        sample = synth.render_scene(spec, cams, frames, d.fps, cfg.conditioning.b_max)
        split = synth.split_geofence(spec, fence) if fence else "train"
        counts[split] += 1
        synth.write_sample(sample, out / split / f"sample_{i:05d}")
    write_manifest(out, args, cfg, {}, {"samples": counts, "frames": frames})
    print(json.dumps(counts))


def cmd_train_tokenizer(args, cfg: RunConfig) -> None:
    from .pipeline import train_tokenizer
    path = train_tokenizer(cfg, Path(args.out), args.seed, args.steps,
                           Path(args.resume) if args.resume else None)
    write_manifest(Path(args.out), args, cfg, {"tokenizer": path})
    print(path)


def _latents_for_training(cfg: RunConfig, args, out: Path):
    from .pipeline import LatentSet, encode_specs, load_ema_tokenizer, wm_specs
    if args.latents:
        return LatentSet.load(_require(args.latents, "latent set", "pass a file written by train-wm"))
    tok_path = _require(args.tokenizer, "tokenizer checkpoint", "train one with `miniwm train-tokenizer`")
    tok = load_ema_tokenizer(cfg, tok_path)
    ls, _ = encode_specs(cfg, tok, wm_specs(cfg, cfg.dataset.n_train, args.seed + 1), embedding_seed=args.embedding_seed)
    ls.specs = None
    ls.save(out / "latents_train.ckpt", cfg.stage_hash("latents"))
    return ls


def cmd_train_wm(args, cfg: RunConfig) -> None:
    from .pipeline import train_world_model
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ls = _latents_for_training(cfg, args, out)
    saved = train_world_model(cfg, out, ls, args.seed, args.steps, Path(args.resume) if args.resume else None)
    write_manifest(out, args, cfg, {p.name: p for p in saved})
    for p in saved:
        print(p)


def cmd_train(args, cfg: RunConfig) -> None:
    from .pipeline import run_toy_pipeline
    if args.steps is not None:
        cfg.training.wm_steps = args.steps
    run = run_toy_pipeline(cfg, Path(args.out), args.seed)
    write_manifest(run.dir, args, cfg, {"tokenizer": run.tokenizer_ckpt,
                                        **{p.name: p for p in run.wm_ckpts}})
    print(run.dir)


def _load_models(args, cfg: RunConfig):
    from .pipeline import load_ema_tokenizer, load_ema_world_model
    wm_path = _require(args.checkpoint, "world-model checkpoint",
                       "pass --checkpoint PATH (produced by `miniwm train-wm` or `miniwm train`)")
    tok_path = _require(args.tokenizer, "tokenizer checkpoint",
                        "pass --tokenizer PATH (produced by `miniwm train-tokenizer`)")
    wm, meta = load_ema_world_model(cfg, wm_path)
    tok = load_ema_tokenizer(cfg, tok_path)
    return wm, tok, meta, {"world_model": wm_path, "tokenizer": tok_path}


def _conditioning_sample(args, cfg: RunConfig, frames: int) -> synth.VideoSample:
    """A scene spec drawn from the seed with command-line overrides, rendered for its labels."""
    from .pipeline import rig
    d = cfg.dataset
    rng = np.random.default_rng(args.seed)
    spec = synth.sample_scene_spec(rng, T_v=frames, fps=d.fps, b_max=cfg.conditioning.b_max, max_agents=d.max_agents)
    if getattr(args, "weather", None):
        spec.weather = args.weather
    if getattr(args, "time_of_day", None):
        spec.time_of_day = args.time_of_day
    if getattr(args, "country", None):
        spec.country = args.country
    if getattr(args, "speed", None) is not None:
        spec.speed = np.full(frames, float(args.speed))
    if getattr(args, "curvature", None) is not None:
        spec.curvature = np.full(frames, float(args.curvature))
    try:
        spec.validate(frames, cfg.conditioning.b_max)
    except synth.SceneValidationError as e:
        raise DataError(str(e)) from None
    return synth.render_scene(spec, rig(cfg), frames, d.fps, cfg.conditioning.b_max)


def _write_generation(out: Path, frames: torch.Tensor, args, cfg: RunConfig, ckpts: dict, echo: dict) -> None:
    from .pipeline import generation_schedule
    synth.write_frames_dir(frames.numpy(), out)
    info = {"seed": args.seed, "config_hash": cfg.hash(), "schedule": list(generation_schedule(cfg).taus),
            "guidance_scale": args.guidance if args.guidance is not None else cfg.inference.guidance_scale,
            "conditioning": echo}
    (out / "generation.json").write_text(json.dumps(info, indent=1, sort_keys=True))
    write_manifest(out, args, cfg, ckpts)


def _echo(sample: synth.VideoSample) -> dict:
    s = sample.spec
    return {"weather": s.weather, "time_of_day": s.time_of_day, "country": s.country, "lanes": s.lanes,
            "speed": float(np.mean(s.speed)), "curvature": float(np.mean(s.curvature)), "n_agents": len(s.agents)}


def cmd_generate(args, cfg: RunConfig) -> None:
    from .pipeline import generate_videos, providers
    wm, tok, meta, ckpts = _load_models(args, cfg)
    sample = _conditioning_sample(args, cfg, cfg.dataset.wm_frames)
    cond = inputs_from_sample(sample, cfg.conditioning, cfg.tokenizer.temporal_factor,
                              providers(cfg, args.embedding_seed))
    _, frames = generate_videos(cfg, wm, tok, meta, cond, args.seed, args.guidance)
    _write_generation(Path(args.out), frames[0], args, cfg, ckpts, _echo(sample))


def _encode_dir(tok, path: Path, cfg: RunConfig):
    from .pipeline import encode_video
    try:
        frames = synth.read_frames_dir(path)
    except (FileNotFoundError, OSError) as e:
        raise DataError(f"cannot read frames from {path}: {e}") from None
    tf = cfg.tokenizer.temporal_factor
    frames = frames[: (frames.shape[0] // tf) * tf]
    if frames.shape[0] == 0:
        raise DataError(f"{path} holds fewer than {tf} frames")
    if frames.shape[1] != cfg.dataset.n_cameras or frames.shape[2:4] != (cfg.dataset.height, cfg.dataset.width):
        raise DataError(f"{path} frames have shape {frames.shape[1:4]}, config expects "
                        f"({cfg.dataset.n_cameras}, {cfg.dataset.height}, {cfg.dataset.width})")
    mean, _ = encode_video(tok, frames)
    return mean[None]


def cmd_rollout(args, cfg: RunConfig) -> None:
    from .inference import GuidanceConfig, rollout_with_model
    from .pipeline import decode_latents, generation_schedule, providers
    from .world_model import denormalize_latents, normalize_latents
    wm, tok, meta, ckpts = _load_models(args, cfg)
    ctx_dir = _require(args.context, "context directory", "pass --context DIR with cam*/ frame folders")
    z = _encode_dir(tok, ctx_dir, cfg)
    k = cfg.inference.context_latents
    if z.shape[1] < k:
        raise DataError(f"context has {z.shape[1]} latents, need {k}")
    z = z[:, -k:]
    window = wm.cfg.n_latent_frames
    n_iter = -(-args.horizon // (window - k)) if args.horizon else 0
    total = k + n_iter * (window - k)
    tf = cfg.tokenizer.temporal_factor
    sample = _conditioning_sample(args, cfg, max(total, window) * tf)
    cond = inputs_from_sample(sample, cfg.conditioning, tf, providers(cfg, args.embedding_seed))
    x = normalize_latents(z, meta["latent_mean"], meta["latent_std"])
    gen = torch.Generator().manual_seed(args.seed)
    scale = cfg.inference.guidance_scale if args.guidance is None else args.guidance
    seq = rollout_with_model(wm, x, cond, args.horizon, generation_schedule(cfg), GuidanceConfig(scale), gen)
    frames = decode_latents(tok, denormalize_latents(seq, meta["latent_mean"], meta["latent_std"]))
    _write_generation(Path(args.out), frames[0], args, cfg, ckpts, {**_echo(sample), "horizon": args.horizon,
                                                                     "latents": int(seq.shape[1])})


def _read_mask(path: Path, shape) -> torch.Tensor:
    """Mask JSON: {"cameras": [..], "rows": [r0, r1], "cols": [c0, c1]} in latent cells, or {"mask": nested lists}."""
    try:
        spec = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read mask {path}: {e}") from None
    T, N, H, W = shape
    if "mask" in spec:
        m = torch.as_tensor(np.asarray(spec["mask"], dtype=bool))
        if m.shape != (T, N, H, W):
            raise DataError(f"mask shape {tuple(m.shape)} != latent grid {(T, N, H, W)}")
        return m
    m = torch.zeros((T, N, H, W), dtype=torch.bool)
    r0, r1 = spec.get("rows", [0, H])
    c0, c1 = spec.get("cols", [0, W])
    for n in spec.get("cameras", list(range(N))):
        m[:, n, r0:r1, c0:c1] = True
    return m


def cmd_inpaint(args, cfg: RunConfig) -> None:
    from .inference import GuidanceConfig, GuidedVelocity, inpaint
    from .pipeline import decode_latents, generation_schedule, providers
    from .world_model import denormalize_latents, normalize_latents
    wm, tok, meta, ckpts = _load_models(args, cfg)
    src = _require(args.input, "input video", "pass --input DIR with cam*/ frame folders")
    z = _encode_dir(tok, src, cfg)[:, :wm.cfg.n_latent_frames]
    mask = _read_mask(_require(args.mask, "mask file", "pass --mask mask.json"), z.shape[1:5])[None]
    sample = _conditioning_sample(args, cfg, z.shape[1] * cfg.tokenizer.temporal_factor)
    cond = inputs_from_sample(sample, cfg.conditioning, cfg.tokenizer.temporal_factor, providers(cfg, args.embedding_seed))
    x = normalize_latents(z, meta["latent_mean"], meta["latent_std"])
    scale = cfg.inference.guidance_scale if args.guidance is None else args.guidance
    vel = GuidedVelocity(wm, cond, GuidanceConfig(scale), keep_mask=~mask)
    out = inpaint(x, mask, vel, generation_schedule(cfg), torch.Generator().manual_seed(args.seed))
    frames = decode_latents(tok, denormalize_latents(out, meta["latent_mean"], meta["latent_std"]))
    _write_generation(Path(args.out), frames[0], args, cfg, ckpts, {**_echo(sample), "masked_cells": int(mask.sum())})


def cmd_edit(args, cfg: RunConfig) -> None:
    from .inference import GuidanceConfig, GuidedVelocity, edit_scene
    from .pipeline import decode_latents, generation_schedule, providers
    from .world_model import denormalize_latents, normalize_latents
    wm, tok, meta, ckpts = _load_models(args, cfg)
    src = _require(args.input, "input video", "pass --input DIR (a sample directory or frame tree)")
    z = _encode_dir(tok, src, cfg)[:, :wm.cfg.n_latent_frames]
    sample = _conditioning_sample(args, cfg, z.shape[1] * cfg.tokenizer.temporal_factor)
    cond = inputs_from_sample(sample, cfg.conditioning, cfg.tokenizer.temporal_factor, providers(cfg, args.embedding_seed))
    x = normalize_latents(z, meta["latent_mean"], meta["latent_std"])
    tau = cfg.inference.edit_tau if args.tau is None else args.tau
    scale = cfg.inference.guidance_scale if args.guidance is None else args.guidance
    out = edit_scene(x, tau, GuidedVelocity(wm, cond, GuidanceConfig(scale)), generation_schedule(cfg),
                     torch.Generator().manual_seed(args.seed))
    frames = decode_latents(tok, denormalize_latents(out, meta["latent_mean"], meta["latent_std"]))
    _write_generation(Path(args.out), frames[0], args, cfg, ckpts, {**_echo(sample), "tau_edit": tau})


def _frames_under(path: Path) -> np.ndarray:
    """All frames below a directory: either one frame tree or many sample directories."""
    path = _require(path, "directory", "pass a directory of frames")
    trees = [p.parent for p in sorted(path.rglob("cam0")) if p.parent.name != "masks"]
    if not trees:
        raise DataError(f"no cam0/ frame folders under {path}")
    arrays = []
    for t in trees:
        f = synth.read_frames_dir(t)
        arrays.append(f.reshape(-1, *f.shape[2:]))
    return np.concatenate(arrays)


def cmd_evaluate(args, cfg: RunConfig) -> None:
    from .features import FrozenConvExtractor
    from .metrics import conditioning_iou, extract_features, frechet_distance
    ext = FrozenConvExtractor(cfg.metrics.extractor_seed)
    real = extract_features(_frames_under(Path(args.real)), ext)
    gen = extract_features(_frames_under(Path(args.generated)), ext)
    report = {"frechet_distance": frechet_distance(real, gen), "n_real": len(real.values),
              "n_generated": len(gen.values), "extractor_seed": cfg.metrics.extractor_seed,
              "config_hash": cfg.hash()}
    labelled = sorted(Path(args.real).rglob("labels.json"))
    if labelled:
        boxes, valid, cats, masks = [], [], [], []
        for lab in labelled:
            s = synth.read_sample(lab.parent)
            T, N = s.masks.shape[:2]
            A = s.boxes.shape[2]
            cat = np.array([a.category for a in s.spec.agents], dtype=int).reshape(1, 1, A)
            boxes.append(s.boxes.reshape(T * N, A, 4))
            valid.append(s.box_valid.reshape(T * N, A))
            cats.append(np.broadcast_to(cat, (T, N, A)).reshape(T * N, A))
            masks.append(s.masks.reshape(T * N, *s.masks.shape[2:]))
        A = max(b.shape[1] for b in boxes)
        pad = lambda a, fill: np.concatenate([a, np.full((*a.shape[:1], A - a.shape[1], *a.shape[2:]), fill)], 1)
        r = conditioning_iou(np.concatenate([pad(b, 0.0) for b in boxes]), np.concatenate([pad(v, False) for v in valid]),
                             np.concatenate([pad(c, -1) for c in cats]), np.concatenate(masks))
        report["iou"] = {synth.CATEGORIES[k]: v for k, v in r.iou.items()}
        report["iou_support"] = {synth.CATEGORIES[k]: v for k, v in r.support.items()}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1, sort_keys=True))
    print(json.dumps(report, sort_keys=True))


def cmd_selftest(args, cfg: RunConfig) -> None:
    from .selftest import run_selftest
    failures = run_selftest(verbose=True)
    if failures:
        raise FloatingPointError(f"{failures} self-test check(s) failed")


COMMANDS = {
    "make-dataset": cmd_make_dataset, "train-tokenizer": cmd_train_tokenizer, "train-wm": cmd_train_wm,
    "train": cmd_train, "generate": cmd_generate, "rollout": cmd_rollout, "inpaint": cmd_inpaint,
    "edit": cmd_edit, "evaluate": cmd_evaluate, "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="miniwm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", default="toy", help="preset name (toy, paper-shape) or JSON file")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--embedding-seed", type=int, default=0, help="seed of the stub embedding providers")
        s.add_argument("--workers", type=int, default=1, help="torch intra-op threads")
        s.add_argument("-v", "--verbose", action="store_true")
        return s

    s = add("make-dataset", "render a labelled synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--geofence", action="store_true", help="route samples in the held-out map region to val/")

    for name in ("train-tokenizer", "train-wm", "train"):
        s = add(name, {"train-tokenizer": "train the video tokenizer", "train-wm": "train the world model",
                       "train": "run the full toy pipeline (tokenizer, encoding, world model)"}[name])
        s.add_argument("--out", required=True)
        s.add_argument("--steps", type=int, default=None)
        s.add_argument("--resume", default=None)
        if name == "train-wm":
            s.add_argument("--tokenizer", default=None)
            s.add_argument("--latents", default=None)

    for name in ("generate", "rollout", "inpaint", "edit"):
        s = add(name, f"{name} with a trained world model")
        s.add_argument("--out", required=True)
        s.add_argument("--checkpoint", default=None, help="world-model checkpoint")
        s.add_argument("--tokenizer", default=None, help="tokenizer checkpoint")
        s.add_argument("--guidance", type=float, default=None)
        s.add_argument("--weather", choices=synth.WEATHERS)
        s.add_argument("--time-of-day", choices=synth.TIMES_OF_DAY)
        s.add_argument("--country", choices=synth.COUNTRIES)
        s.add_argument("--speed", type=float)
        s.add_argument("--curvature", type=float)
        if name == "rollout":
            s.add_argument("--context", default=None)
            s.add_argument("--horizon", type=int, default=3)
        if name in ("inpaint", "edit"):
            s.add_argument("--input", default=None)
        if name == "inpaint":
            s.add_argument("--mask", default=None)
        if name == "edit":
            s.add_argument("--tau", type=float, default=None)

    s = add("evaluate", "compare real and generated videos")
    s.add_argument("--real", required=True)
    s.add_argument("--generated", required=True)
    s.add_argument("--out", required=True)

    add("selftest", "run the built-in oracle and invariant checks")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.workers))
    try:
        cfg = parse_config(args.config)
        _seed_all(args.seed)
        COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ckpt.CheckpointError, synth.SceneValidationError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
