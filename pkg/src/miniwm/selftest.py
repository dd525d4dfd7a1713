"""Fast oracle and invariant checks runnable from an installed package (`miniwm selftest`)."""
from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .conditioning import CURVATURE_SYMLOG, SPEED_SYMLOG, symlog, symlog_inverse
from .config import parse_config
from .inference import GuidanceConfig, cfg_combine, edit_scene, euler_denoise, inpaint, linear_quadratic_schedule
from .metrics import FeatureSet, frechet_distance
from .tokenizer import compression_rate, latent_shape
from .world_model import make_flow_batch


def _oracle(x_true):
    return lambda x, tau: (x_true - x) / (1.0 - tau)


def check_constants():
    assert abs(symlog(10.0, SPEED_SYMLOG) - math.log(37) / math.log(271)) < 1e-12
    assert abs(symlog(0.01, CURVATURE_SYMLOG) - math.log(11) / math.log(101)) < 1e-12
    y = np.linspace(-75, 75, 101)
    assert np.allclose(symlog_inverse(symlog(y, SPEED_SYMLOG), SPEED_SYMLOG), y, rtol=1e-9, atol=1e-12)


def check_shapes():
    cfg = parse_config("paper-shape")
    assert latent_shape(cfg.tokenizer, (24, 448, 960, 3)) == (3, 14, 30, 64)
    assert compression_rate(cfg.tokenizer, (24, 448, 960, 3)) == 384
    assert cfg.world_model_config().n_tokens() == 12_600


def check_schedule():
    s = linear_quadratic_schedule(50, 25, 1000)
    assert s.taus[0] == 0.0 and s.taus[-1] == 1.0 and s.taus[25] == 0.025
    assert abs(s.taus[26] - 0.02656) < 1e-12


def check_sampler():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 6, 2, 2, 4, 8, generator=g, dtype=torch.float64)
    s = linear_quadratic_schedule()
    eps = torch.randn(x.shape, generator=g, dtype=torch.float64)
    out = euler_denoise(eps, 0, s, _oracle(x))
    assert (out - x).abs().max() < 1e-6
    rec = edit_scene(x, 0.999, _oracle(x), s, torch.Generator().manual_seed(1))
    assert (rec - x).abs().max() < 1e-5


def check_inpaint_and_cfg():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 6, 2, 2, 4, 8, generator=g)
    mask = torch.zeros(1, 6, 2, 2, 4, dtype=torch.bool)
    mask[:, :, 0, :, :2] = True
    out = inpaint(x, mask, lambda z, t: torch.ones_like(z), linear_quadratic_schedule(), g)
    assert torch.equal(out[~mask], x[~mask])
    vc, vu = torch.randn(2, *x.shape, generator=g)
    gm = GuidanceConfig(5.0, mask)
    v = cfg_combine(vc, vu, gm)
    assert torch.equal(v[~mask], vc[~mask])
    assert torch.allclose(v[mask], (vu + 5.0 * (vc - vu))[mask])


def check_flow_identities():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 3, 1, 2, 2, 4, generator=g)
    eps = torch.randn(x.shape, generator=g)
    assert torch.equal(make_flow_batch(x, torch.ones(2), eps=eps).xt, x)
    assert torch.equal(make_flow_batch(x, torch.zeros(2), eps=eps).xt, eps)


def check_frechet():
    rng = np.random.default_rng(0)
    a = FeatureSet(rng.normal(size=(200, 4)))
    assert frechet_distance(a, a) < 1e-6


def check_checkpoint():
    t = {"w": torch.arange(6, dtype=torch.float32).reshape(2, 3)}
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "a.ckpt"
        ckpt.save_archive(p, t, {"config_hash": "x", "step": 3})
        back, meta = ckpt.load_archive(p, "x")
        assert torch.equal(back["w"], t["w"]) and meta["step"] == 3
        p.write_bytes(p.read_bytes()[:-4])
        try:
            ckpt.load_archive(p)
        except ckpt.CheckpointCorruptError:
            pass
        else:
            raise AssertionError("truncated archive was accepted")


CHECKS = [check_constants, check_shapes, check_schedule, check_sampler, check_inpaint_and_cfg,
          check_flow_identities, check_frechet, check_checkpoint]


def run_selftest(verbose: bool = False) -> int:
    failures = 0
    for check in CHECKS:
        try:
            check()
            status = "ok"
        except Exception as e:  # report every failing check, not just the first
            failures += 1
            status = f"FAIL ({type(e).__name__}: {e})"
        if verbose:
            print(f"{check.__name__[6:]:<20} {status}")
    return failures
